import io
import json

import pytest
from fastapi.testclient import TestClient
from PIL import Image

from wildcount.geo import make_patch_id
from wildcount.service import create_app
from wildcount.store import (
    ReviewStore,
    assign_detections_to_patches,
    load_run_directory,
)
from wildcount.synth import SceneConfig, generate_scene


@pytest.fixture()
def run_dir(tmp_path):
    """A fake prescreen+infer run over two 128x128 scenes (patch 64)."""
    scenes = {}
    for i, sid in enumerate(("imgA", "imgB")):
        cfg = SceneConfig(width=128, height=128, n_animals=0, seed=60 + i)
        img, _, _ = generate_scene(cfg, image_id=sid)
        path = tmp_path / f"{sid}.png"
        Image.fromarray(img).save(path)
        scenes[sid] = {"path": f"{sid}.png", "width": 128, "height": 128}
    meta = {"patch_size": 64, "overlap_px": 16, "tau": 0.5, "images": scenes}
    (tmp_path / "run_meta.json").write_text(json.dumps(meta))
    # five flagged patches: three on imgA, two on imgB
    flags = [
        {"patch_id": make_patch_id("imgA", (0, 0)), "image_id": "imgA",
         "origin": [0, 0], "probability": 0.95},
        {"patch_id": make_patch_id("imgA", (48, 0)), "image_id": "imgA",
         "origin": [48, 0], "probability": 0.80},
        {"patch_id": make_patch_id("imgA", (0, 48)), "image_id": "imgA",
         "origin": [0, 48], "probability": 0.70},
        {"patch_id": make_patch_id("imgB", (0, 0)), "image_id": "imgB",
         "origin": [0, 0], "probability": 0.90},
        {"patch_id": make_patch_id("imgB", (64, 64)), "image_id": "imgB",
         "origin": [64, 64], "probability": 0.60},
    ]
    with open(tmp_path / "flags.jsonl", "w") as fh:
        for f in flags:
            fh.write(json.dumps(f) + "\n")
    # global detections: 3 in imgA patch (0,0); 1 in imgA (48,0)-ish zone;
    # 1 in imgB (0,0); 1 in imgB (64,64)
    rows = ["image_id,x,y,confidence",
            "imgA,10.0,12.0,0.9", "imgA,20.0,8.0,0.8", "imgA,5.5,30.0,0.7",
            "imgA,70.0,10.0,0.85",
            "imgB,12.0,12.0,0.95", "imgB,100.0,100.0,0.65"]
    (tmp_path / "detections.csv").write_text("\n".join(rows) + "\n")
    return tmp_path


@pytest.fixture()
def client(run_dir):
    store = ReviewStore(":memory:")
    load_run_directory(store, run_dir)
    app = create_app(store)
    return TestClient(app)


def _post(client, patch_id, verdict, points=None, reviewer="alice"):
    body = {"reviewer": reviewer, "verdict": verdict}
    if points is not None:
        body["corrected_points"] = points
    return client.post(f"/api/patches/{patch_id}/review", json=body)


class TestQueue:
    def test_pending_sorted_by_probability(self, client):
        res = client.get("/api/patches?status=pending")
        assert res.status_code == 200
        items = res.json()["items"]
        probs = [i["probability"] for i in items]
        assert probs == sorted(probs, reverse=True)
        assert res.json()["total"] == 5

    def test_paging(self, client):
        res = client.get("/api/patches?status=pending&page=2&page_size=2")
        doc = res.json()
        assert doc["total"] == 5
        assert len(doc["items"]) == 2

    def test_decided_moves_out_of_pending(self, client):
        pid = make_patch_id("imgA", (0, 0))
        _post(client, pid, "accept")
        pending = client.get("/api/patches?status=pending").json()
        assert all(i["patch_id"] != pid for i in pending["items"])
        decided = client.get("/api/patches?status=decided").json()
        assert any(i["patch_id"] == pid for i in decided["items"])

    def test_bad_status_rejected(self, client):
        assert client.get("/api/patches?status=weird").status_code == 422


class TestPatchData:
    def test_image_endpoint_lossless_png(self, client):
        pid = make_patch_id("imgA", (0, 0))
        res = client.get(f"/api/patches/{pid}/image")
        assert res.status_code == 200
        assert res.headers["content-type"] == "image/png"
        img = Image.open(io.BytesIO(res.content))
        assert img.size == (64, 64)

    def test_detections_endpoint(self, client):
        pid = make_patch_id("imgA", (0, 0))
        res = client.get(f"/api/patches/{pid}/detections")
        points = res.json()["points"]
        assert len(points) == 3
        assert all(0 <= p["x"] < 64 and 0 <= p["y"] < 64 for p in points)

    def test_unknown_patch_404(self, client):
        assert client.get("/api/patches/nope:000000_000000/image").status_code == 404
        assert client.get("/api/patches/nope:000000_000000/detections").status_code == 404


class TestDecisions:
    def test_reject_drops_detections_from_summary(self, client):
        before = client.get("/api/summary").json()
        assert before["total_raw"] == 6
        assert before["total_reviewed"] == 6
        pid = make_patch_id("imgA", (0, 0))  # holds 3 detections
        res = _post(client, pid, "reject")
        assert res.status_code == 201
        after = client.get("/api/summary").json()
        assert after["total_reviewed"] == before["total_reviewed"] - 3
        assert after["images"]["imgA"]["reviewed"] == before["images"]["imgA"]["reviewed"] - 3

    def test_correction_replaces_detections(self, client):
        pid = make_patch_id("imgB", (0, 0))  # 1 detection
        res = _post(client, pid, "corrected", points=[[10.0, 11.0], [20.0, 21.0]])
        assert res.status_code == 201
        after = client.get("/api/summary").json()
        assert after["images"]["imgB"]["reviewed"] == 2 + 1  # corrected 2 + other patch 1

    def test_malformed_decisions_422(self, client):
        pid = make_patch_id("imgA", (0, 0))
        assert _post(client, pid, "corrected").status_code == 422  # missing points
        assert _post(client, pid, "accept", points=[[1, 1]]).status_code == 422
        res = client.post(f"/api/patches/{pid}/review",
                          json={"reviewer": "", "verdict": "accept"})
        assert res.status_code == 422

    def test_decision_on_unknown_patch_404(self, client):
        assert _post(client, "ghost:000000_000000", "accept").status_code == 404

    def test_override_on_unflagged_patch_allowed_and_audited(self, client):
        pid = make_patch_id("imgA", (48, 48))  # valid tile, never flagged
        res = _post(client, pid, "accept")
        assert res.status_code == 201
        history = client.get(f"/api/patches/{pid}/decisions").json()["history"]
        assert history[-1]["on_unflagged"] is True

    def test_supersede_keeps_history(self, client):
        pid = make_patch_id("imgA", (0, 0))
        _post(client, pid, "accept")
        _post(client, pid, "reject", reviewer="bob")
        history = client.get(f"/api/patches/{pid}/decisions").json()["history"]
        assert [h["verdict"] for h in history] == ["accept", "reject"]
        assert client.get("/api/summary").json()["images"]["imgA"]["reviewed"] == 1

    def test_undo_restores_prior_state(self, client):
        pid = make_patch_id("imgA", (0, 0))
        _post(client, pid, "accept")
        _post(client, pid, "reject")
        res = client.delete(f"/api/patches/{pid}/review")
        assert res.status_code == 200
        assert res.json()["active_verdict"] == "accept"
        history = client.get(f"/api/patches/{pid}/decisions").json()["history"]
        assert len(history) == 2
        assert history[1]["revoked"] is True
        # undo with nothing active -> back to pending, then 404
        client.delete(f"/api/patches/{pid}/review")
        assert client.delete(f"/api/patches/{pid}/review").status_code == 404

    def test_replay_is_idempotent(self, run_dir):
        def play(client):
            _post(client, make_patch_id("imgA", (0, 0)), "reject")
            _post(client, make_patch_id("imgB", (0, 0)), "corrected",
                  points=[[5.0, 5.0], [9.0, 9.0]])
            _post(client, make_patch_id("imgB", (64, 64)), "accept")
            return client.get("/api/summary").json()

        summaries = []
        for _ in range(2):
            store = ReviewStore(":memory:")
            load_run_directory(store, run_dir)
            summaries.append(play(TestClient(create_app(store))))
        assert summaries[0] == summaries[1]


class TestExports:
    def test_export_identity_with_zero_decisions(self, client):
        res = client.get("/api/export/annotations")
        assert res.status_code == 200
        lines = [l for l in res.text.strip().splitlines()[1:] if l]
        assert len(lines) == 6  # all raw detections, global frame

    def test_export_reflects_review_and_reingests(self, client, tmp_path):
        _post(client, make_patch_id("imgA", (0, 0)), "reject")
        _post(client, make_patch_id("imgB", (0, 0)), "corrected",
              points=[[5.0, 5.0], [9.0, 9.0]])
        summary = client.get("/api/summary").json()
        res = client.get("/api/export/annotations")
        csv_path = tmp_path / "export.csv"
        csv_path.write_text(res.text)
        from wildcount.geo import read_annotations
        points = read_annotations(csv_path)
        per_image = {}
        for p in points:
            per_image[p.image_id] = per_image.get(p.image_id, 0) + 1
        for image_id, entry in summary["images"].items():
            assert per_image.get(image_id, 0) == entry["reviewed"]

    def test_hnp_candidates_lists_rejections(self, client):
        pid = make_patch_id("imgA", (0, 0))
        _post(client, pid, "reject")
        res = client.get("/api/export/hnp-candidates")
        patches = res.json()["patches"]
        assert [p["patch_id"] for p in patches] == [pid]


class TestAuth:
    def test_token_required_when_configured(self, run_dir):
        store = ReviewStore(":memory:")
        load_run_directory(store, run_dir)
        client = TestClient(create_app(store, token="sekrit"))
        assert client.get("/api/summary").status_code == 401
        ok = client.get("/api/summary", headers={"Authorization": "Bearer sekrit"})
        assert ok.status_code == 200


class TestAssignment:
    def test_each_detection_gets_one_owner(self):
        origins = [(0, 0), (48, 0), (0, 48), (48, 48)]
        dets = [(10, 10, 0.9), (50, 10, 0.8), (60, 60, 0.7), (40, 40, 0.6)]
        owners = assign_detections_to_patches(dets, origins, 64)
        total = sum(len(v) for v in owners.values())
        assert total == len(dets)
        # the (50,10) detection is inside patches (0,0) and (48,0); the
        # nearer patch center is (32,32), so (0,0) owns it
        assert any(abs(x - 50.0) < 1e-9 for x, y, c in owners[(0, 0)])

    def test_local_coordinates(self):
        owners = assign_detections_to_patches([(70.0, 10.0, 0.5)], [(48, 0)], 64)
        (x, y, c), = owners[(48, 0)]
        assert (x, y) == (22.0, 10.0)
