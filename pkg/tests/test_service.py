import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from pointgrow.raster import RasterImage, encode_image_png
from pointgrow.service import create_app
from pointgrow.superpixels import compute_hierarchy, extract_k
from pointgrow.synthetic import SyntheticSceneSpec, gen_synthetic_scene
from pointgrow.weaklabel import (
    PointAnnotation,
    PointSet,
    PropagationConfig,
    load_points,
    propagate,
    pseudo_mask_png_bytes,
)


@pytest.fixture()
def client():
    app = create_app(size_limit=256, warm_hierarchy=False)
    with TestClient(app) as c:
        yield c


def scene_png(seed=0, size=32):
    img, _ = gen_synthetic_scene(SyntheticSceneSpec(width=size, height=size), seed)
    return encode_image_png(img), img


def halves_png():
    px = np.zeros((4, 4, 3), dtype=np.uint8)
    px[:, 2:, :] = 255
    return encode_image_png(RasterImage(px)), px


def upload(client, body):
    return client.post("/api/images", content=body, headers={"content-type": "image/png"})


class TestUpload:
    def test_valid_upload_retrievable(self, client):
        body, img = scene_png()
        r = upload(client, body)
        assert r.status_code == 201
        image_id = r.json()["image_id"]
        meta = client.get(f"/api/images/{image_id}")
        assert meta.status_code == 200
        assert meta.json()["width"] == 32

    def test_corrupt_body_400(self, client):
        assert upload(client, b"not a png").status_code == 400

    def test_oversize_413(self, client):
        px = np.zeros((300, 300, 3), dtype=np.uint8)
        assert upload(client, encode_image_png(RasterImage(px))).status_code == 413

    def test_unknown_id_404(self, client):
        assert client.get("/api/images/feedfacedeadbeef").status_code == 404


class TestSuperpixels:
    def test_k1_single_region_no_boundaries(self, client):
        body, _ = scene_png()
        image_id = upload(client, body).json()["image_id"]
        r = client.get(f"/api/images/{image_id}/superpixels", params={"k": 1})
        assert r.status_code == 200
        doc = r.json()
        assert doc["k"] == 1
        assert doc["boundaries"] == []
        png = Image.open(io.BytesIO(base64.b64decode(doc["map"])))
        assert np.asarray(png).max() == 0

    def test_identical_requests_identical_payloads(self, client):
        body, _ = scene_png(3)
        image_id = upload(client, body).json()["image_id"]
        a = client.get(f"/api/images/{image_id}/superpixels", params={"k": 9}).json()
        b = client.get(f"/api/images/{image_id}/superpixels", params={"k": 9}).json()
        assert a == b

    def test_k_out_of_range_422(self, client):
        body, _ = scene_png(1)
        image_id = upload(client, body).json()["image_id"]
        assert client.get(f"/api/images/{image_id}/superpixels", params={"k": 0}).status_code == 422
        assert client.get(f"/api/images/{image_id}/superpixels", params={"k": 5000}).status_code == 422

    def test_map_matches_library(self, client):
        body, img = scene_png(5)
        image_id = upload(client, body).json()["image_id"]
        doc = client.get(f"/api/images/{image_id}/superpixels", params={"k": 7}).json()
        served = np.asarray(Image.open(io.BytesIO(base64.b64decode(doc["map"]))))
        expect = extract_k(compute_hierarchy(img), 7, img.width, img.height).labels
        assert np.array_equal(served, expect)


class TestPoints:
    def test_add_then_delete_restores(self, client):
        body, _ = scene_png(2)
        image_id = upload(client, body).json()["image_id"]
        r1 = client.post(f"/api/images/{image_id}/points", json={"x": 3, "y": 4, "class_id": 2})
        assert r1.status_code == 200
        assert r1.json()["points"] == [{"index": 0, "x": 3, "y": 4, "class_id": 2}]
        r2 = client.delete(f"/api/images/{image_id}/points/0")
        assert r2.json()["points"] == []

    def test_duplicate_pixel_422(self, client):
        body, _ = scene_png(2)
        image_id = upload(client, body).json()["image_id"]
        client.post(f"/api/images/{image_id}/points", json={"x": 1, "y": 1, "class_id": 0})
        r = client.post(f"/api/images/{image_id}/points", json={"x": 1, "y": 1, "class_id": 3})
        assert r.status_code == 422

    def test_out_of_bounds_and_bad_class_422(self, client):
        body, _ = scene_png(2)
        image_id = upload(client, body).json()["image_id"]
        assert client.post(f"/api/images/{image_id}/points",
                           json={"x": 99, "y": 0, "class_id": 0}).status_code == 422
        assert client.post(f"/api/images/{image_id}/points",
                           json={"x": 0, "y": 0, "class_id": 9}).status_code == 422
        assert client.delete(f"/api/images/{image_id}/points/5").status_code == 422


class TestPseudomask:
    def test_zero_points_ignore_coverage_zero(self, client):
        body, _ = scene_png(4)
        image_id = upload(client, body).json()["image_id"]
        doc = client.get(f"/api/images/{image_id}/pseudomask", params={"k": 5}).json()
        assert doc["coverage"] == 0.0
        assert doc["per_class_point_counts"] == [0, 0, 0, 0, 0]

    def test_worked_4x4_example_over_http(self, client):
        body, _ = halves_png()
        image_id = upload(client, body).json()["image_id"]
        for x, y, class_id in ((0, 0, 1), (1, 0, 2), (3, 3, 3)):
            r = client.post(f"/api/images/{image_id}/points",
                            json={"x": x, "y": y, "class_id": class_id})
            assert r.status_code == 200
        doc = client.get(f"/api/images/{image_id}/pseudomask", params={"k": 2}).json()
        labels = np.asarray(Image.open(io.BytesIO(base64.b64decode(doc["labels"]))))
        mask = np.asarray(Image.open(io.BytesIO(base64.b64decode(doc["mask"]))))
        assert (labels[:, :2] == 1).all()  # tie -> smallest class id
        assert (labels[:, 2:] == 3).all()
        assert (mask == 255).all()
        assert doc["coverage"] == 1.0

    def test_matches_library_bytes(self, client):
        body, img = scene_png(6)
        image_id = upload(client, body).json()["image_id"]
        pts = [(1, 1, 1), (10, 12, 3), (20, 5, 4)]
        for x, y, c in pts:
            client.post(f"/api/images/{image_id}/points", json={"x": x, "y": y, "class_id": c})
        doc = client.get(f"/api/images/{image_id}/pseudomask",
                         params={"k": 11, "policy": "supervise"}).json()
        spmap = extract_k(compute_hierarchy(img), 11, img.width, img.height)
        pm = propagate(PointSet([PointAnnotation(*p) for p in pts]), spmap,
                       PropagationConfig("supervise"), 5)
        labels_png, mask_png = pseudo_mask_png_bytes(pm)
        assert base64.b64decode(doc["labels"]) == labels_png
        assert base64.b64decode(doc["mask"]) == mask_png

    def test_bad_policy_422(self, client):
        body, _ = scene_png(4)
        image_id = upload(client, body).json()["image_id"]
        r = client.get(f"/api/images/{image_id}/pseudomask", params={"policy": "maybe"})
        assert r.status_code == 422


class TestExport:
    def test_round_trip_through_cli_loader(self, client, tmp_path):
        body, img = scene_png(7)
        image_id = upload(client, body).json()["image_id"]
        pts = [(2, 3, 1), (15, 20, 2)]
        for x, y, c in pts:
            client.post(f"/api/images/{image_id}/points", json={"x": x, "y": y, "class_id": c})
        r = client.get(f"/api/images/{image_id}/export")
        assert r.status_code == 200
        assert "attachment" in r.headers["content-disposition"]
        csv_path = tmp_path / "exported.csv"
        csv_path.write_bytes(r.content)
        loaded = load_points(csv_path)
        assert [(p.x, p.y, p.class_id) for p in loaded.points] == pts
        # pseudomask recomputed from the export equals the served one
        doc = client.get(f"/api/images/{image_id}/pseudomask", params={"k": 9}).json()
        spmap = extract_k(compute_hierarchy(img), 9, img.width, img.height)
        pm = propagate(loaded, spmap, PropagationConfig("ignore"), 5)
        labels_png, mask_png = pseudo_mask_png_bytes(pm)
        assert base64.b64decode(doc["labels"]) == labels_png
        assert base64.b64decode(doc["mask"]) == mask_png

    def test_empty_export_header_only(self, client):
        body, _ = scene_png(8)
        image_id = upload(client, body).json()["image_id"]
        r = client.get(f"/api/images/{image_id}/export")
        assert r.content == b"x,y,class\r\n"

    def test_sidecar(self, client):
        body, _ = scene_png(8)
        image_id = upload(client, body).json()["image_id"]
        r = client.get(f"/api/images/{image_id}/export/sidecar")
        assert r.json() == {"source": "manual", "seed": 0}


class TestInvariants:
    def test_coverage_monotone_in_k(self, client):
        body, _ = scene_png(9)
        image_id = upload(client, body).json()["image_id"]
        rng = np.random.default_rng(0)
        placed = set()
        while len(placed) < 12:
            x, y = int(rng.integers(0, 32)), int(rng.integers(0, 32))
            if (x, y) in placed:
                continue
            placed.add((x, y))
            client.post(f"/api/images/{image_id}/points",
                        json={"x": x, "y": y, "class_id": int(rng.integers(0, 5))})
        prev = 1.1
        for k in (8, 32, 128, 512):
            doc = client.get(f"/api/images/{image_id}/pseudomask", params={"k": k}).json()
            assert doc["coverage"] <= prev + 1e-12
            prev = doc["coverage"]

    def test_classes_endpoint(self, client):
        doc = client.get("/api/classes").json()
        assert doc["num_classes"] == 5
        assert doc["classes"][1]["name"] == "buildings"
        assert len(doc["classes"][0]["color"]) == 3

    def test_single_flight_hierarchy(self, client, monkeypatch):
        import threading

        import pointgrow.superpixels as sp

        body, _ = scene_png(10)
        image_id = upload(client, body).json()["image_id"]
        calls = []
        original = sp.agglomerate

        def counting(graph, config=None):
            calls.append(1)
            return original(graph, config)

        monkeypatch.setattr(sp, "agglomerate", counting)
        results = []

        def fetch():
            results.append(
                client.get(f"/api/images/{image_id}/superpixels", params={"k": 4}).status_code
            )

        threads = [threading.Thread(target=fetch) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == [200, 200, 200, 200]
        assert len(calls) == 1
