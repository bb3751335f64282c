import dataclasses
import json
import math

import numpy as np
import pytest

from viewforge.core import Scene, ViewSpec, seeded_rng
from viewforge.guidance import (
    BackendError,
    UnsupportedViewError,
    create_mock_nvs_backend,
    default_supported_views,
    snap_view,
    synthesize_guidance,
    view_distance,
)


def brute_force_snap(req, supported):
    def dist(a, b):
        de = a.elevation_deg - b.elevation_deg
        da = abs(a.azimuth_deg - b.azimuth_deg)
        da = min(da, 360.0 - da)
        return math.sqrt(de * de + da * da)
    best, best_d = None, float("inf")
    for cand in supported:
        d = dist(req, cand)
        if d < best_d:
            best, best_d = cand, d
    return best


def make_scene(seed=0, size=64, sid="s1"):
    return Scene(image=seeded_rng(seed, f"gimg:{sid}").random((size, size, 3)),
                 caption="a test object", scene_id=sid)


class TestDefaultViews:
    def test_contains_30_30(self):
        assert ViewSpec(30, 30) in default_supported_views()

    def test_contains_minus20_210(self):
        assert ViewSpec(-20, 210) in default_supported_views()

    def test_exactly_six_views(self):
        views = default_supported_views()
        assert len(views) == 6
        assert len({v.key() for v in views}) == 6

    def test_alternating_elevations_and_60_degree_spacing(self):
        views = default_supported_views()
        azis = [v.azimuth_deg for v in views]
        assert azis == [30, 90, 150, 210, 270, 330]
        assert [v.elevation_deg for v in views] == [30, -20, 30, -20, 30, -20]


class TestSnapView:
    def test_exact_member_maps_to_itself(self):
        sup = default_supported_views()
        for v in sup:
            assert snap_view(v, sup) == v

    def test_derived_example_25_35(self):
        assert snap_view(ViewSpec(25, 35), default_supported_views()) == ViewSpec(30, 30)

    def test_derived_example_wraparound(self):
        assert snap_view(ViewSpec(0, 359), default_supported_views()) == ViewSpec(-20, 330)

    def test_matches_brute_force_on_random_requests(self):
        sup = default_supported_views()
        rng = seeded_rng(0, "snap-prop")
        for _ in range(1000):
            req = ViewSpec(float(rng.uniform(-90, 90)), float(rng.uniform(0, 360)))
            got = snap_view(req, sup)
            want = brute_force_snap(req, sup)
            assert view_distance(req, got) == pytest.approx(view_distance(req, want))

    def test_idempotent(self):
        sup = default_supported_views()
        rng = seeded_rng(0, "snap-idem")
        for _ in range(100):
            req = ViewSpec(float(rng.uniform(-90, 90)), float(rng.uniform(0, 360)))
            once = snap_view(req, sup)
            assert snap_view(once, sup) == once

    def test_output_always_member(self):
        sup = default_supported_views()
        rng = seeded_rng(0, "snap-member")
        for _ in range(200):
            req = ViewSpec(float(rng.uniform(-90, 90)), float(rng.uniform(-720, 720)))
            assert snap_view(req, sup) in sup

    def test_tie_breaks_to_earliest(self):
        sup = [ViewSpec(0, 10), ViewSpec(0, 30)]
        assert snap_view(ViewSpec(0, 20), sup) == ViewSpec(0, 10)


class TestSynthesizeGuidance:
    def test_second_call_is_cached_and_bit_identical(self, tmp_path):
        calls = {"n": 0}
        base = create_mock_nvs_backend()
        orig = base.synthesize

        def counting(image, view):
            calls["n"] += 1
            return orig(image, view)

        backend = dataclasses.replace(base, synthesize=counting)
        scene = make_scene()
        g1 = synthesize_guidance(scene, ViewSpec(30, 30), backend, tmp_path, snap=True)
        g2 = synthesize_guidance(scene, ViewSpec(30, 30), backend, tmp_path, snap=True)
        assert calls["n"] == 1
        assert np.array_equal(g1.image, g2.image)
        assert g1.cache_key == g2.cache_key

    def test_snap_false_rejects_non_member(self, tmp_path):
        backend = create_mock_nvs_backend()
        with pytest.raises(UnsupportedViewError):
            synthesize_guidance(make_scene(), ViewSpec(0, 0), backend, tmp_path, snap=False)

    def test_realized_view_example_30_270(self, tmp_path):
        backend = create_mock_nvs_backend()
        g = synthesize_guidance(make_scene(), ViewSpec(30, 270), backend, tmp_path, snap=True)
        assert g.realized_view == ViewSpec(30, 270)
        assert g.realized_view in backend.supported_views

    def test_snapped_view_recorded_in_provenance(self, tmp_path):
        backend = create_mock_nvs_backend()
        g = synthesize_guidance(make_scene(), ViewSpec(25, 35), backend, tmp_path, snap=True)
        assert g.requested_view == ViewSpec(25, 35)
        assert g.realized_view == ViewSpec(30, 30)

    def test_cache_layout_and_sidecar(self, tmp_path):
        backend = create_mock_nvs_backend()
        scene = make_scene()
        g = synthesize_guidance(scene, ViewSpec(30, 30), backend, tmp_path, snap=True)
        scene_hash = g.cache_key.split("/")[1]
        png = tmp_path / "mock" / scene_hash / "30_30.png"
        meta = tmp_path / "mock" / scene_hash / "30_30.json"
        assert png.is_file() and meta.is_file()
        doc = json.loads(meta.read_text())
        assert doc["backend_name"] == "mock"
        assert doc["realized_view"] == [30.0, 30.0]
        assert doc["backend_version"]

    def test_cache_key_changes_with_each_input(self, tmp_path):
        backend = create_mock_nvs_backend()
        s1, s2 = make_scene(seed=1, sid="a"), make_scene(seed=2, sid="b")
        k1 = synthesize_guidance(s1, ViewSpec(30, 30), backend, tmp_path, snap=True).cache_key
        k2 = synthesize_guidance(s2, ViewSpec(30, 30), backend, tmp_path, snap=True).cache_key
        k3 = synthesize_guidance(s1, ViewSpec(30, 270), backend, tmp_path, snap=True).cache_key
        other = dataclasses.replace(backend, name="mock2")
        k4 = synthesize_guidance(s1, ViewSpec(30, 30), other, tmp_path, snap=True).cache_key
        assert len({k1, k2, k3, k4}) == 4
        # identical inputs reproduce the identical key
        assert synthesize_guidance(s1, ViewSpec(30, 30), backend, tmp_path,
                                   snap=True).cache_key == k1

    def test_backend_failure_wrapped(self, tmp_path):
        def boom(image, view):
            raise RuntimeError("synth exploded")
        backend = dataclasses.replace(create_mock_nvs_backend(), synthesize=boom)
        with pytest.raises(BackendError) as err:
            synthesize_guidance(make_scene(), ViewSpec(30, 30), backend, tmp_path, snap=True)
        assert "synth exploded" in str(err.value)

    def test_mock_output_valid_and_view_dependent(self, tmp_path):
        backend = create_mock_nvs_backend()
        scene = make_scene()
        imgs = {}
        for v in backend.supported_views:
            g = synthesize_guidance(scene, v, backend, tmp_path, snap=False)
            assert g.image.shape == scene.image.shape
            assert g.image.min() >= 0.0 and g.image.max() <= 1.0
            imgs[v.key()] = g.image
        keys = list(imgs)
        assert not np.array_equal(imgs[keys[0]], imgs[keys[1]])
