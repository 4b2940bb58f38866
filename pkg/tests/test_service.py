import numpy as np
import pytest
from fastapi.testclient import TestClient

from partfit import dataprep as dp
from partfit import encoder as enc
from partfit import geometry as geo
from partfit import relnet as rn
from partfit import retrieval as rv
from partfit.service import CreateSessionPayload, Engine, create_app


ENC_CFG = enc.EncoderConfig(point_widths=(16, 32), head_widths=(24, 8))
REL_CFG = rn.RelNetConfig(num_classes=3, feature_dim=8, layers=1, heads=2, model_width=16)


@pytest.fixture(scope="module")
def world():
    raw = dp.generate_synthetic(["table", "chair", "plane"], 9, seed=71)
    dataset = dp.build_datasets(raw, seed=71)
    rng = np.random.default_rng(72)
    bundle = rn.ModelBundle(
        enc_params=enc.init_params(ENC_CFG, rng),
        rel_params=rn.init_params(REL_CFG, rng),
        enc_config=ENC_CFG, rel_config=REL_CFG,
        class_names=dataset.class_names, part_label_names=dataset.part_label_names)
    index = rv.build_index(dataset.warehouse, bundle.enc_params)
    return dataset, bundle, index


@pytest.fixture()
def engine(world, tmp_path):
    dataset, bundle, index = world
    return Engine(bundle, index, dataset, session_dir=tmp_path / "sessions")


@pytest.fixture()
def client(engine):
    return TestClient(create_app(engine))


def payload_for(dataset, item_idx=0, n_slots=2):
    item = dataset.items[item_idx]
    removed = item.parts[:n_slots]
    removed_ids = {p.part_id for p in removed}
    parts = [{"points": geo.denormalize_part(p.cloud, p.pose).tolist()}
             for p in item.parts if p.part_id not in removed_ids]
    slots = [{"centroid": p.pose.centroid.tolist(),
              "axis": p.pose.axis.tolist(),
              "scale": p.pose.scale} for p in removed]
    return {"class_id": item.object_class, "parts": parts, "slots": slots}


class TestCreateSession:
    def test_valid_create(self, client, world):
        dataset, _, _ = world
        resp = client.post("/v1/sessions", json=payload_for(dataset))
        assert resp.status_code == 201
        body = resp.json()
        assert body["revision"] == 1
        assert not body["completed"]
        cands = client.get(f"/v1/sessions/{body['session_id']}/candidates", params={"k": 5})
        assert cands.status_code == 200
        assert len(cands.json()["candidates"]) == 5

    def test_empty_parts_rejected_with_field(self, client):
        resp = client.post("/v1/sessions", json={"class_id": 0, "parts": [],
                                                 "slots": [{"centroid": [0, 0, 0]}]})
        assert resp.status_code == 400
        body = resp.json()
        assert body["code"] == "validation"
        assert "parts" in body["field"]

    def test_nan_coordinate_rejected(self, client):
        raw = ('{"class_id": 0, "parts": [{"points": [[0.0, NaN, 0.0], [1.0, 0.0, 0.0]]}],'
               ' "slots": [{"centroid": [0, 0, 0]}]}')
        resp = client.post("/v1/sessions", content=raw,
                           headers={"content-type": "application/json"})
        assert resp.status_code == 400
        assert "parts[0]" in resp.json()["message"]

    def test_unknown_class(self, client, world):
        dataset, _, _ = world
        payload = payload_for(dataset)
        payload["class_id"] = 17
        resp = client.post("/v1/sessions", json=payload)
        assert resp.status_code == 422
        assert resp.json()["code"] == "unknown_class"


class TestCandidates:
    def test_sorted_and_stable(self, client, world):
        dataset, _, _ = world
        sid = client.post("/v1/sessions", json=payload_for(dataset)).json()["session_id"]
        a = client.get(f"/v1/sessions/{sid}/candidates", params={"k": 10}).json()
        b = client.get(f"/v1/sessions/{sid}/candidates", params={"k": 10}).json()
        assert a == b
        assert [c["rank"] for c in a["candidates"]] == list(range(1, 11))
        # suitability is non-increasing within each open slot; the page
        # interleaves slots so every open slot gets exposure
        by_slot = {}
        for c in a["candidates"]:
            by_slot.setdefault(c["slot"], []).append(c["suitability"])
        for suits in by_slot.values():
            assert suits == sorted(suits, reverse=True)
        assert all(c["pose"]["centroid"] is not None for c in a["candidates"])

    def test_unknown_session_404(self, client):
        resp = client.get("/v1/sessions/deadbeef/candidates")
        assert resp.status_code == 404
        assert resp.json()["code"] == "not_found"

    def test_gets_are_side_effect_free(self, client, engine, world):
        dataset, _, _ = world
        sid = client.post("/v1/sessions", json=payload_for(dataset)).json()["session_id"]
        client.get(f"/v1/sessions/{sid}/candidates", params={"k": 5})
        before = engine.state_hash()
        client.get(f"/v1/sessions/{sid}")
        client.get(f"/v1/sessions/{sid}/candidates", params={"k": 5})
        client.get(f"/v1/sessions/{sid}/candidates", params={"k": 3})
        assert engine.state_hash() == before


class TestChoose:
    def run_create(self, client, dataset):
        body = client.post("/v1/sessions", json=payload_for(dataset)).json()
        sid = body["session_id"]
        cands = client.get(f"/v1/sessions/{sid}/candidates", params={"k": 5}).json()
        return sid, body["revision"], cands["candidates"]

    def test_valid_choice_advances(self, client, world):
        dataset, _, _ = world
        sid, rev, cands = self.run_create(client, dataset)
        state0 = client.get(f"/v1/sessions/{sid}").json()
        resp = client.post(f"/v1/sessions/{sid}/selection",
                           json={"part_id": cands[0]["part_id"], "revision": rev})
        assert resp.status_code == 200
        body = resp.json()
        assert body["revision"] == rev + 1
        assert body["parts"] == len(state0["parts"]) + 1
        assert body["active_slot"] == 1
        state = client.get(f"/v1/sessions/{sid}").json()
        chosen = [p for p in state["parts"] if p["source"] == "chosen"]
        assert len(chosen) == 1
        assert chosen[0]["points"]  # placed geometry retrievable

    def test_stale_revision_conflict(self, client, engine, world):
        dataset, _, _ = world
        sid, rev, cands = self.run_create(client, dataset)
        before = engine.state_hash()
        resp = client.post(f"/v1/sessions/{sid}/selection",
                           json={"part_id": cands[0]["part_id"], "revision": rev + 5})
        assert resp.status_code == 409
        assert resp.json()["code"] == "stale_revision"
        assert engine.state_hash() == before

    def test_foreign_part_rejected(self, client, world):
        dataset, _, index = world
        sid, rev, cands = self.run_create(client, dataset)
        shown = {c["part_id"] for c in cands}
        outsider = next(int(p) for p in index.part_ids if int(p) not in shown)
        resp = client.post(f"/v1/sessions/{sid}/selection",
                           json={"part_id": outsider, "revision": rev})
        assert resp.status_code == 422
        assert resp.json()["code"] == "invalid_choice"

    def test_completion_flow(self, client, world):
        dataset, _, _ = world
        sid, rev, cands = self.run_create(client, dataset)
        client.post(f"/v1/sessions/{sid}/selection",
                    json={"part_id": cands[0]["part_id"], "revision": rev})
        cands2 = client.get(f"/v1/sessions/{sid}/candidates", params={"k": 5}).json()
        resp = client.post(f"/v1/sessions/{sid}/selection",
                           json={"part_id": cands2["candidates"][0]["part_id"],
                                 "revision": cands2["revision"]})
        assert resp.json()["completed"] is True
        final = client.get(f"/v1/sessions/{sid}/candidates").json()
        assert final["completed"] is True
        assert final["candidates"] == []


class TestWarehouseParts:
    def test_geometry_round_trip(self, client, world):
        dataset, _, _ = world
        part = dataset.warehouse[0]
        resp = client.get(f"/v1/warehouse/parts/{part.part_id}")
        assert resp.status_code == 200
        body = resp.json()
        assert body["part_id"] == part.part_id
        assert len(body["points"]) == len(part.cloud)
        np.testing.assert_allclose(np.asarray(body["points"]), part.cloud, atol=1e-12)
        assert body["pose"]["scale"] == pytest.approx(part.pose.scale)

    def test_unknown_part_404(self, client):
        assert client.get("/v1/warehouse/parts/99999999").status_code == 404


class TestRestart:
    def test_restart_restores_identical_rankings(self, world, tmp_path):
        dataset, bundle, index = world
        session_dir = tmp_path / "sessions"
        engine = Engine(bundle, index, dataset, session_dir=session_dir)
        client = TestClient(create_app(engine))
        body = client.post("/v1/sessions", json=payload_for(dataset, item_idx=1)).json()
        sid = body["session_id"]
        first = client.get(f"/v1/sessions/{sid}/candidates", params={"k": 7}).json()
        client.post(f"/v1/sessions/{sid}/selection",
                    json={"part_id": first["candidates"][0]["part_id"],
                          "revision": body["revision"]})
        second = client.get(f"/v1/sessions/{sid}/candidates", params={"k": 7}).json()

        reborn = Engine(bundle, index, dataset, session_dir=session_dir)
        client2 = TestClient(create_app(reborn))
        state = client2.get(f"/v1/sessions/{sid}").json()
        assert state["revision"] == 2
        assert len(state["history"]) == 1
        again = client2.get(f"/v1/sessions/{sid}/candidates", params={"k": 7}).json()
        assert again["candidates"] == second["candidates"]


class TestEngineValidation:
    def test_hash_mismatch_rejected(self, world, tmp_path):
        dataset, bundle, index = world
        other = rn.ModelBundle(
            enc_params=enc.init_params(ENC_CFG, np.random.default_rng(999)),
            rel_params=bundle.rel_params, enc_config=ENC_CFG, rel_config=REL_CFG,
            class_names=bundle.class_names, part_label_names=bundle.part_label_names)
        with pytest.raises(Exception, match="hash"):
            Engine(other, index, dataset)

    def test_payload_model_accepts_dict(self, world):
        dataset, _, _ = world
        payload = CreateSessionPayload(**payload_for(dataset))
        assert len(payload.parts) >= 1


class TestConcurrentReads:
    def test_gets_observe_revision_consistent_snapshots(self, world, tmp_path):
        import threading

        dataset, bundle, index = world
        engine = Engine(bundle, index, dataset, session_dir=tmp_path / "s")
        client = TestClient(create_app(engine))
        body = client.post("/v1/sessions", json=payload_for(dataset)).json()
        sid = body["session_id"]
        torn = []
        stop = threading.Event()

        def reader():
            while not stop.is_set():
                state = client.get(f"/v1/sessions/{sid}").json()
                # a snapshot is consistent when the revision implies exactly
                # revision-1 applied choices
                if state["revision"] != len(state["history"]) + 1:
                    torn.append(state)

        threads = [threading.Thread(target=reader) for _ in range(3)]
        for t in threads:
            t.start()
        try:
            for _ in range(2):
                page = client.get(f"/v1/sessions/{sid}/candidates", params={"k": 4}).json()
                if page["completed"]:
                    break
                client.post(f"/v1/sessions/{sid}/selection",
                            json={"part_id": page["candidates"][0]["part_id"],
                                  "revision": page["revision"]})
        finally:
            stop.set()
            for t in threads:
                t.join()
        assert torn == []
