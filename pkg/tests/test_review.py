import json
import struct
import urllib.error
import urllib.request

import numpy as np
import pytest

from moslabel import pipeline, review
from moslabel.dataset import CLASS_DYNAMIC, CLASS_STATIC
from test_pipeline import small_config


@pytest.fixture(scope="module")
def served_run(demo_bundle, tmp_path_factory):
    bundle_dir, _, _ = demo_bundle
    out_dir = tmp_path_factory.mktemp("serve")
    config = small_config(bundle_dir, out_dir)
    pipeline.run(config)
    server = review.serve_review(out_dir, "127.0.0.1:0")
    host, port = server.server_address
    yield f"http://{host}:{port}", out_dir, config
    server.shutdown()


def _get(url):
    return urllib.request.urlopen(url, timeout=10).read()


def _get_json(url):
    return json.loads(_get(url))


def _post_json(url, body):
    req = urllib.request.Request(
        url, data=json.dumps(body).encode(), headers={"Content-Type": "application/json"}
    )
    return json.loads(urllib.request.urlopen(req, timeout=10).read())


class TestEndpoints:
    def test_frames_listing(self, served_run):
        base, _, _ = served_run
        frames = _get_json(base + "/api/frames")
        assert [f["frame"] for f in frames] == sorted(f["frame"] for f in frames)
        assert all({"frame", "points", "dynamic"} <= set(f) for f in frames)

    def test_points_payload_layout(self, served_run):
        base, _, _ = served_run
        frames = _get_json(base + "/api/frames")
        t = frames[0]["frame"]
        raw = _get(f"{base}/api/frames/{t}/points")
        (count,) = struct.unpack("<I", raw[:4])
        assert count == frames[0]["points"]
        assert len(raw) == 4 + count * 16
        record = np.frombuffer(raw[4:], dtype="<u4").reshape(-1, 4)
        positions = record[:, :3].view("<f4")
        assert np.isfinite(positions).all()

    def test_tracks_endpoint(self, served_run):
        base, _, _ = served_run
        frames = _get_json(base + "/api/frames")
        busiest = max(frames, key=lambda f: f["dynamic"])["frame"]
        payload = _get_json(f"{base}/api/frames/{busiest}/tracks")
        assert "tracks" in payload and "augmented" in payload
        for tr in payload["tracks"]:
            assert any(o["frame"] == busiest for o in tr["observations"])

    def test_edit_read_your_writes(self, served_run):
        base, out_dir, _ = served_run
        frames = _get_json(base + "/api/frames")
        target = max(frames, key=lambda f: f["dynamic"])
        t = target["frame"]
        raw = np.frombuffer(_get(f"{base}/api/frames/{t}/points")[4:], dtype="<u4").reshape(-1, 4)
        dyn_instances = np.unique(raw[(raw[:, 3] & 0xFFFF) == CLASS_DYNAMIC, 3] >> 16)
        instance = int(dyn_instances[0])
        before = _get_json(base + "/api/summary")
        result = _post_json(
            f"{base}/api/frames/{t}/edits", {"instance_id": instance, "new_class": "static"}
        )
        assert result["ok"]
        raw2 = np.frombuffer(_get(f"{base}/api/frames/{t}/points")[4:], dtype="<u4").reshape(-1, 4)
        sel = (raw2[:, 3] >> 16) == instance
        assert ((raw2[sel, 3] & 0xFFFF) == CLASS_STATIC).all()
        after = _get_json(base + "/api/summary")
        assert after["edits"] == before["edits"] + 1
        assert (out_dir / pipeline.EDITS_FILE).exists()

    def test_unknown_instance_rejected(self, served_run):
        base, _, _ = served_run
        frames = _get_json(base + "/api/frames")
        t = frames[0]["frame"]
        with pytest.raises(urllib.error.HTTPError) as err:
            _post_json(f"{base}/api/frames/{t}/edits", {"instance_id": 987654, "new_class": "static"})
        assert err.value.code == 400
        assert "987654" in json.loads(err.value.read())["error"]

    def test_unknown_frame_404(self, served_run):
        base, _, _ = served_run
        with pytest.raises(urllib.error.HTTPError) as err:
            _get(f"{base}/api/frames/99999/points")
        assert err.value.code == 404

    def test_edits_fold_into_export(self, served_run):
        base, out_dir, config = served_run
        edits = pipeline.read_edits(out_dir / pipeline.EDITS_FILE)
        assert edits  # written by the read-your-writes test above
        results = pipeline.run(config)
        export = next(r for r in results if r.stage == "export")
        assert export.counts["edits_applied"] == len(edits)
