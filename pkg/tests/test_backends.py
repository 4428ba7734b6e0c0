from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from hatbench import backends as bk
from hatbench import dataset as ds
from hatbench.geometry import BBox, iou

PERSON_PROMPT = "person"


def perfect(seed=0):
    return bk.OracleConfig(seed=seed)


def person_boxes(manifest, image_id):
    image = manifest.image_map()[image_id]
    return {
        inst.box.as_tuple() for inst in image.instances if inst.label is ds.ClassLabel.PERSON
    }


class TestOracleBackend:
    def test_perfect_oracle_returns_exact_person_boxes(self, cascaded_manifest):
        oracle = bk.OracleBackend(cascaded_manifest, perfect())
        dets = oracle.detect(bk.DetectionQuery("hhw_0001", PERSON_PROMPT, 0.1))
        assert {d.box.as_tuple() for d in dets} == person_boxes(cascaded_manifest, "hhw_0001")
        assert all(d.score == 1.0 for d in dets)

    def test_total_miss_returns_nothing(self, cascaded_manifest):
        oracle = bk.OracleBackend(cascaded_manifest, bk.OracleConfig(miss_rate=1.0))
        assert oracle.detect(bk.DetectionQuery("hhw_0001", PERSON_PROMPT, 0.1)) == []

    def test_unknown_image(self, cascaded_manifest):
        oracle = bk.OracleBackend(cascaded_manifest, perfect())
        with pytest.raises(bk.UnknownImage):
            oracle.detect(bk.DetectionQuery("nope", PERSON_PROMPT, 0.1))

    def test_unknown_prompt_yields_nothing(self, cascaded_manifest):
        oracle = bk.OracleBackend(cascaded_manifest, perfect())
        assert oracle.detect(bk.DetectionQuery("hhw_0001", "zebra", 0.1)) == []

    def test_region_query_returns_region_frame_boxes(self, cascaded_manifest):
        oracle = bk.OracleBackend(cascaded_manifest, perfect())
        person = BBox(240, 80, 340, 280)  # second person in hhw_0001
        dets = oracle.detect(bk.DetectionQuery("hhw_0001", "head", 0.1, region=person))
        assert len(dets) == 1
        # head GT (260,80,320,130) relative to the person crop
        assert dets[0].box == BBox(20, 0, 80, 50)

    def test_object_outside_region_invisible(self, direct_nested_manifest):
        oracle = bk.OracleBackend(direct_nested_manifest, perfect())
        person = BBox(100, 100, 200, 300)  # hhw_0002 person; ground helmet far away
        dets = oracle.detect(bk.DetectionQuery("hhw_0002", "helmet", 0.1, region=person))
        assert len(dets) == 1  # worn helmet only

    def test_determinism_across_instances(self, cascaded_manifest):
        config = bk.OracleConfig(miss_rate=0.3, fp_rate=1.5, jitter=0.1, seed=42)
        a = bk.OracleBackend(cascaded_manifest, config)
        b = bk.OracleBackend(cascaded_manifest, config)
        query = bk.DetectionQuery("shel_0003", PERSON_PROMPT, 0.05)
        assert a.detect(query) == b.detect(query)

    def test_seed_changes_output(self, cascaded_manifest):
        query = bk.DetectionQuery("shel_0003", PERSON_PROMPT, 0.05)
        outs = {
            tuple(
                d.box.as_tuple()
                for d in bk.OracleBackend(
                    cascaded_manifest, bk.OracleConfig(jitter=0.2, seed=seed)
                ).detect(query)
            )
            for seed in range(5)
        }
        assert len(outs) > 1

    def test_query_order_does_not_matter(self, cascaded_manifest):
        config = bk.OracleConfig(miss_rate=0.2, fp_rate=1.0, jitter=0.05, seed=7)
        q1 = bk.DetectionQuery("hhw_0001", PERSON_PROMPT, 0.05)
        q2 = bk.DetectionQuery("shel_0006", PERSON_PROMPT, 0.05)
        a = bk.OracleBackend(cascaded_manifest, config)
        first = (a.detect(q1), a.detect(q2))
        b = bk.OracleBackend(cascaded_manifest, config)
        second = (b.detect(q2), b.detect(q1))
        assert first == (second[1], second[0])

    def test_threshold_monotonicity(self, cascaded_manifest):
        config = bk.OracleConfig(
            fp_rate=3.0, jitter=0.1, score_model=bk.ScoreModel(tp=(0.3, 1.0)), seed=3
        )
        oracle = bk.OracleBackend(cascaded_manifest, config)
        previous = None
        for threshold in (0.05, 0.2, 0.4, 0.6, 0.9):
            dets = {
                (d.box.as_tuple(), d.score)
                for d in oracle.detect(bk.DetectionQuery("shel_0004", PERSON_PROMPT, threshold))
            }
            assert all(score >= threshold for _, score in dets)
            if previous is not None:
                assert dets <= previous
            previous = dets

    def test_jitter_iou_bound(self, direct_nested_manifest):
        j = 0.2
        bound = (1 - 2 * j) ** 2 / (1 + 2 * j) ** 2
        gt_boxes = [
            inst.box
            for img in direct_nested_manifest.images
            for inst in img.instances
            if inst.label is ds.ClassLabel.HELMET
        ]
        for seed in range(10):
            oracle = bk.OracleBackend(direct_nested_manifest, bk.OracleConfig(jitter=j, seed=seed))
            for img in direct_nested_manifest.images:
                for det in oracle.detect(bk.DetectionQuery(img.image_id, "helmet", 0.05)):
                    best = max(iou(det.box, gt) for gt in gt_boxes)
                    assert best >= bound - 1e-9

    def test_false_positive_geometry(self, cascaded_manifest):
        oracle = bk.OracleBackend(
            cascaded_manifest, bk.OracleConfig(miss_rate=1.0, fp_rate=4.0, seed=11)
        )
        image = cascaded_manifest.image_map()["shel_0001"]
        region = image.dims.as_box()
        dets = oracle.detect(bk.DetectionQuery("shel_0001", PERSON_PROMPT, 0.0))
        assert dets, "expected some false positives at fp_rate=4"
        for det in dets:
            assert region.contains(det.box, tol=1e-9)
            fraction = det.box.area / region.area
            assert 0.01 - 1e-9 <= fraction <= 0.25 + 1e-9


class TestFixtureBackend:
    def record(self, tmp_path, manifest, thresholds=(0.05,)):
        oracle = bk.OracleBackend(manifest, bk.OracleConfig(score_model=bk.ScoreModel(tp=(0.3, 0.9)), jitter=0.05, seed=5))
        queries = [
            bk.DetectionQuery(img.image_id, PERSON_PROMPT, t)
            for img in manifest.images[:3]
            for t in thresholds
        ]
        path = tmp_path / "fixture.jsonl"
        bk.record_fixture(queries, oracle, path)
        return path, oracle, queries

    def test_round_trip(self, tmp_path, cascaded_manifest):
        path, oracle, queries = self.record(tmp_path, cascaded_manifest)
        replay = bk.FixtureBackend(path)
        for query in queries:
            assert replay.detect(query) == oracle.detect(query)

    def test_replay_is_stable_across_loads(self, tmp_path, cascaded_manifest):
        path, _, queries = self.record(tmp_path, cascaded_manifest)
        a = bk.FixtureBackend(path)
        b = bk.FixtureBackend(path)
        assert [a.detect(q) for q in queries] == [b.detect(q) for q in queries]

    def test_unrecorded_key_raises(self, tmp_path, cascaded_manifest):
        path, _, _ = self.record(tmp_path, cascaded_manifest)
        replay = bk.FixtureBackend(path)
        with pytest.raises(bk.UnknownImage):
            replay.detect(bk.DetectionQuery("shel_0006", "helmet", 0.05))

    def test_region_canonicalization(self, tmp_path, cascaded_manifest):
        oracle = bk.OracleBackend(cascaded_manifest, perfect())
        recorded_query = bk.DetectionQuery(
            "hhw_0001", "head", 0.05, region=BBox(240.0, 80.0, 340.0, 280.0)
        )
        path = tmp_path / "fixture.jsonl"
        bk.record_fixture([recorded_query], oracle, path)
        replay = bk.FixtureBackend(path)
        nudged = bk.DetectionQuery(
            "hhw_0001", "head", 0.05, region=BBox(240.0000004, 80.0, 340.0, 280.0)
        )
        assert replay.detect(nudged) == oracle.detect(recorded_query)

    def test_higher_threshold_filters_recorded_detections(self, tmp_path, cascaded_manifest):
        path, _, _ = self.record(tmp_path, cascaded_manifest)
        replay = bk.FixtureBackend(path)
        low = replay.detect(bk.DetectionQuery("hhw_0001", PERSON_PROMPT, 0.05))
        high = replay.detect(bk.DetectionQuery("hhw_0001", PERSON_PROMPT, 0.6))
        assert set(high) <= set(low)
        assert all(d.score >= 0.6 for d in high)

    def test_query_below_recorded_threshold_raises(self, tmp_path, cascaded_manifest):
        path, _, _ = self.record(tmp_path, cascaded_manifest, thresholds=(0.3,))
        replay = bk.FixtureBackend(path)
        with pytest.raises(bk.UnknownImage):
            replay.detect(bk.DetectionQuery("hhw_0001", PERSON_PROMPT, 0.05))

    def test_failed_recording_leaves_no_file(self, tmp_path, cascaded_manifest):
        oracle = bk.OracleBackend(cascaded_manifest, perfect())
        queries = [
            bk.DetectionQuery("hhw_0001", PERSON_PROMPT, 0.05),
            bk.DetectionQuery("missing_image", PERSON_PROMPT, 0.05),
        ]
        path = tmp_path / "fixture.jsonl"
        with pytest.raises(bk.UnknownImage):
            bk.record_fixture(queries, oracle, path)
        assert not path.exists()


class _StubHandler(BaseHTTPRequestHandler):
    mode = "ok"

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        body = json.loads(self.rfile.read(length))
        if self.mode == "garbage":
            self.send_response(200)
            self.end_headers()
            self.wfile.write(b"not json at all")
            return
        if self.mode == "flaky":
            type(self).mode = "ok"  # succeed on retry
            self.send_response(500)
            self.end_headers()
            return
        detections = [
            {"box": [10, 10, 60, 80], "score": 0.9, "prompt": body["prompts"][0]},
            {"box": [100, 40, 140, 90], "score": 0.2, "prompt": body["prompts"][0]},
        ]
        payload = json.dumps({"detections": detections}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.mode = "ok"
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


@pytest.fixture()
def image_root(tmp_path):
    from PIL import Image

    for name in ("img_a", "img_b"):
        Image.new("RGB", (320, 240), (90, 110, 130)).save(tmp_path / f"{name}.png")
    return tmp_path


class TestRemoteBackend:
    def test_detect_filters_to_threshold(self, stub_server, image_root):
        remote = bk.RemoteBackend(stub_server, image_root=image_root)
        dets = remote.detect(bk.DetectionQuery("img_a", PERSON_PROMPT, 0.5))
        assert len(dets) == 1
        assert dets[0].box == BBox(10, 10, 60, 80)
        assert dets[0].score == 0.9

    def test_region_crop_shifts_to_region_frame(self, stub_server, image_root):
        remote = bk.RemoteBackend(stub_server, image_root=image_root)
        region = BBox(50.0, 20.0, 250.0, 220.0)
        dets = remote.detect(bk.DetectionQuery("img_a", PERSON_PROMPT, 0.1, region=region))
        assert all(
            0 <= d.box.xmin < d.box.xmax <= region.width
            and 0 <= d.box.ymin < d.box.ymax <= region.height
            for d in dets
        )

    def test_retry_then_success(self, stub_server, image_root):
        _StubHandler.mode = "flaky"
        remote = bk.RemoteBackend(stub_server, image_root=image_root, retries=2, backoff=0.01)
        dets = remote.detect(bk.DetectionQuery("img_a", PERSON_PROMPT, 0.5))
        assert len(dets) == 1

    def test_service_down_raises_backend_unavailable(self, image_root):
        remote = bk.RemoteBackend(
            "http://127.0.0.1:9", image_root=image_root, retries=1, backoff=0.01, timeout=0.5
        )
        with pytest.raises(bk.BackendUnavailable):
            remote.detect(bk.DetectionQuery("img_a", PERSON_PROMPT, 0.5))

    def test_malformed_response_raises_protocol_error(self, stub_server, image_root):
        _StubHandler.mode = "garbage"
        remote = bk.RemoteBackend(stub_server, image_root=image_root)
        with pytest.raises(bk.ProtocolError):
            remote.detect(bk.DetectionQuery("img_a", PERSON_PROMPT, 0.5))

    def test_missing_image_file(self, stub_server, image_root):
        remote = bk.RemoteBackend(stub_server, image_root=image_root)
        with pytest.raises(bk.UnknownImage):
            remote.detect(bk.DetectionQuery("ghost", PERSON_PROMPT, 0.5))
