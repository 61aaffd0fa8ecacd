"""Similarity estimation, scene-graph fusion, and pointmap file formats."""

from __future__ import annotations

import numpy as np
import pytest

from scenedistill.alignment import (
    PairPrediction,
    PointMap,
    Sim3Transform,
    alignment_residual,
    apply_sim3,
    estimate_edge,
    export_ply,
    global_align,
    load_pointmap,
    save_pointmap,
    umeyama,
)
from scenedistill.dataset import SynthSpec, generate_pairs, synth_pair_predictions, synth_scene
from scenedistill.errors import AlignmentError, DegenerateInputError, LoadError


def random_sim3(rng) -> Sim3Transform:
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return Sim3Transform(q, rng.uniform(-5, 5, 3), rng.uniform(0.5, 2.0))


@pytest.fixture(scope="module")
def synth6():
    ds, poses = synth_scene(SynthSpec(n_frames=6, resolution=(24, 24)), seed=7)
    pair_spec = generate_pairs(ds, window=2)
    preds = synth_pair_predictions(ds, poses, pair_spec)
    return ds, poses, preds


class TestUmeyama:
    def test_identity(self, rng):
        pts = rng.standard_normal((20, 3))
        est = umeyama(pts, pts.copy())
        assert np.allclose(est.rotation, np.eye(3), atol=1e-12)
        assert np.isclose(est.scale, 1.0)
        assert np.allclose(est.translation, 0.0, atol=1e-12)

    def test_pure_translation(self, rng):
        src = rng.standard_normal((10, 3))
        est = umeyama(src, src + np.array([1.0, 2.0, 3.0]))
        assert np.allclose(est.rotation, np.eye(3), atol=1e-12)
        assert np.isclose(est.scale, 1.0)
        assert np.allclose(est.translation, [1.0, 2.0, 3.0], atol=1e-12)

    def test_construct_and_recover_100_trials(self, rng):
        for _ in range(100):
            gen = random_sim3(rng)
            src = rng.standard_normal((50, 3))
            dst = gen.apply(src)
            est = umeyama(src, dst, with_scale=True)
            res = est.apply(src) - dst
            rmse = np.sqrt((res**2).sum(axis=1).mean())
            assert rmse <= 1e-9

    def test_too_few_points_rejected(self, rng):
        pts = rng.standard_normal((2, 3))
        with pytest.raises(DegenerateInputError):
            umeyama(pts, pts)

    def test_collinear_points_rejected(self):
        t = np.linspace(0, 1, 10)[:, None]
        src = t * np.array([1.0, 2.0, 3.0])
        dst = t * np.array([3.0, 2.0, 1.0]) + 1.0
        with pytest.raises(DegenerateInputError):
            umeyama(src, dst)

    def test_optimality_against_random_candidates(self, rng):
        src = rng.standard_normal((50, 3))
        dst = random_sim3(rng).apply(src) + rng.normal(0, 0.05, (50, 3))
        est = umeyama(src, dst)
        best = ((est.apply(src) - dst) ** 2).sum()
        for _ in range(1000):
            cand = random_sim3(rng)
            assert best <= ((cand.apply(src) - dst) ** 2).sum() + 1e-12


class TestSim3Transform:
    def test_non_orthonormal_rejected(self):
        with pytest.raises(DegenerateInputError):
            Sim3Transform(np.eye(3) * 1.1, np.zeros(3), 1.0)

    def test_non_positive_scale_rejected(self):
        with pytest.raises(DegenerateInputError):
            Sim3Transform(np.eye(3), np.zeros(3), 0.0)

    def test_inverse_roundtrip(self, rng):
        t = random_sim3(rng)
        pts = rng.standard_normal((30, 3))
        assert np.allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-12)

    def test_compose_matches_sequential_apply(self, rng):
        a, b = random_sim3(rng), random_sim3(rng)
        pts = rng.standard_normal((15, 3))
        assert np.allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)), atol=1e-9)

    def test_rotations_stay_orthonormal_over_long_chains(self, rng):
        t = Sim3Transform.identity()
        small = random_sim3(rng)
        for _ in range(2000):
            t = t.compose(small)
            t = t.compose(small.inverse())
        drift = np.abs(t.rotation.T @ t.rotation - np.eye(3)).max()
        assert drift <= 1e-9
        assert np.linalg.det(t.rotation) > 0


class TestApplySim3:
    def test_identity_unchanged(self, rng):
        pm = PointMap(points=rng.standard_normal((4, 5, 3)), valid=np.ones((4, 5), bool))
        out = apply_sim3(Sim3Transform.identity(), pm)
        assert np.array_equal(out.points, pm.points)
        assert np.array_equal(out.valid, pm.valid)

    def test_inverse_law(self, rng):
        pm = PointMap(points=rng.standard_normal((4, 5, 3)), valid=np.ones((4, 5), bool))
        t = random_sim3(rng)
        out = apply_sim3(t.inverse(), apply_sim3(t, pm))
        assert np.abs(out.points - pm.points).max() <= 1e-9

    def test_matches_per_point_arithmetic(self, rng):
        pm = PointMap(
            points=rng.standard_normal((3, 4, 3)),
            valid=rng.random((3, 4)) > 0.3,
        )
        t = random_sim3(rng)
        out = apply_sim3(t, pm)
        for i in range(3):
            for j in range(4):
                if pm.valid[i, j]:
                    expected = t.scale * t.rotation @ pm.points[i, j] + t.translation
                    assert np.allclose(out.points[i, j], expected, atol=1e-12)
                else:
                    assert np.array_equal(out.points[i, j], pm.points[i, j])


class TestEstimateEdge:
    def test_same_frame_construction_gives_identity(self, rng):
        pm = PointMap(points=rng.standard_normal((6, 6, 3)), valid=np.ones((6, 6), bool))
        pair = PairPrediction(ref_id=0, src_id=1, map_ref=pm, map_src=pm)
        edge = estimate_edge(pair, pm)
        assert np.allclose(edge.transform.rotation, np.eye(3), atol=1e-9)
        assert np.isclose(edge.transform.scale, 1.0)
        assert edge.rmse <= 1e-12

    def test_recovers_known_relative_pose(self, synth6):
        ds, poses, preds = synth6
        pair = next(p for p in preds if (p.ref_id, p.src_id) == (0, 1))
        self_map_1 = next(p for p in preds if p.ref_id == 1).map_ref
        edge = estimate_edge(pair, self_map_1)
        expected = poses[0].inverse().compose(poses[1])  # frame 1 -> frame 0
        assert np.abs(edge.transform.rotation - expected.rotation).max() <= 1e-6
        assert np.abs(edge.transform.translation - expected.translation).max() <= 1e-6
        assert abs(edge.transform.scale - expected.scale) <= 1e-6

    def test_insufficient_joint_valid_pixels(self, rng):
        valid = np.zeros((4, 4), bool)
        valid[0, :2] = True  # only two joint-valid pixels
        pm = PointMap(points=rng.standard_normal((4, 4, 3)), valid=valid)
        pair = PairPrediction(ref_id=0, src_id=1, map_ref=pm, map_src=pm)
        with pytest.raises(DegenerateInputError):
            estimate_edge(pair, pm)


class TestGlobalAlign:
    def test_single_frame_identity(self, rng):
        pm = PointMap(points=rng.standard_normal((4, 4, 3)), valid=np.ones((4, 4), bool))
        world, report = global_align([], origin=0, self_maps={0: pm})
        transform, out = world[0]
        assert np.array_equal(transform.matrix(), np.eye(4))
        assert np.array_equal(out.points, pm.points)
        assert report == []

    def test_six_frame_chain_recovers_ground_truth(self, synth6):
        ds, poses, preds = synth6
        world, report = global_align(preds, origin=0)
        to_world = poses[0].inverse()
        for fid, (transform, pm) in world.items():
            gt = to_world.apply(ds.frames[fid].label.points.reshape(-1, 3))
            assert np.abs(pm.points.reshape(-1, 3) - gt).max() <= 1e-6
        assert all(r["rmse"] <= 1e-9 for r in report)

    def test_origin_transform_is_exact_identity(self, synth6):
        _, _, preds = synth6
        world, _ = global_align(preds, origin=2)
        assert np.array_equal(world[2][0].matrix(), np.eye(4))

    def test_disconnected_graph_names_components(self, synth6):
        _, _, preds = synth6
        subset = [p for p in preds if {p.ref_id, p.src_id} in ({0, 1}, {4, 5})]
        with pytest.raises(AlignmentError) as err:
            global_align(subset, origin=0)
        message = str(err.value)
        assert "0" in message and "4" in message and "5" in message

    def test_input_order_invariance_bitwise(self, synth6):
        _, _, preds = synth6
        world_a, _ = global_align(list(preds), origin=0)
        world_b, _ = global_align(list(reversed(preds)), origin=0)
        for fid in world_a:
            ta, tb = world_a[fid][0], world_b[fid][0]
            assert np.array_equal(ta.rotation, tb.rotation)
            assert np.array_equal(ta.translation, tb.translation)
            assert ta.scale == tb.scale

    def test_unknown_origin_rejected(self, synth6):
        _, _, preds = synth6
        with pytest.raises(AlignmentError):
            global_align(preds, origin=99)


class TestAlignmentResidual:
    def test_perfect_input_near_zero(self, synth6):
        _, _, preds = synth6
        _, report = global_align(preds, origin=0)
        assert len(report) == len(preds)
        assert max(r["rmse"] for r in report) <= 1e-9

    def test_noise_lands_in_expected_band(self, synth6):
        _, _, preds = synth6
        sigma = 0.01
        rng = np.random.default_rng(42)
        noisy = []
        for p in preds:
            if (p.ref_id, p.src_id) == (2, 3):  # not a BFS tree edge from origin 0
                pts = p.map_src.points + rng.normal(0.0, sigma, p.map_src.points.shape)
                p = PairPrediction(p.ref_id, p.src_id, p.map_ref,
                                   PointMap(points=pts, valid=p.map_src.valid.copy()))
            noisy.append(p)
        _, report = global_align(noisy, origin=0)
        edge = next(r for r in report if (r["ref_id"], r["src_id"]) == (2, 3))
        assert 0.5 * sigma <= edge["rmse"] <= 2.0 * sigma

    def test_dropped_edge_absent_from_report(self, synth6):
        _, _, preds = synth6
        broken = []
        for p in preds:
            if (p.ref_id, p.src_id) == (2, 3):
                # kill the joint validity of this ordered pair only
                empty = PointMap(points=p.map_src.points.copy(),
                                 valid=np.zeros_like(p.map_src.valid))
                p = PairPrediction(p.ref_id, p.src_id, p.map_ref, empty)
            broken.append(p)
        world, report = global_align(broken, origin=0)
        assert len(world) == 6  # still connected through remaining edges
        assert not any((r["ref_id"], r["src_id"]) == (2, 3) for r in report)
        assert any((r["ref_id"], r["src_id"]) == (3, 2) for r in report)


class TestPointMapFile:
    def test_roundtrip_byte_identical(self, rng, tmp_path):
        pm = PointMap(
            points=rng.standard_normal((5, 7, 3)).astype(np.float32),
            valid=rng.random((5, 7)) > 0.2,
        )
        p1 = tmp_path / "a.pts"
        p2 = tmp_path / "b.pts"
        save_pointmap(pm, 3, p1)
        loaded, fid = load_pointmap(p1)
        assert fid == 3
        save_pointmap(loaded, fid, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_mask_tracks_non_finite_values(self, tmp_path):
        pts = np.ones((2, 2, 3), dtype=np.float64)
        valid = np.ones((2, 2), bool)
        path = tmp_path / "m.pts"
        save_pointmap(PointMap(points=pts, valid=valid), 0, path)
        # corrupt one float to NaN inside the blob
        raw = bytearray(path.read_bytes())
        header_end = raw.index(b"\n") + 1
        raw[header_end : header_end + 4] = np.array([np.nan], "<f4").tobytes()
        path.write_bytes(bytes(raw))
        loaded, _ = load_pointmap(path)
        assert not loaded.valid[0, 0]
        assert loaded.valid.sum() == 3

    def test_truncated_file_rejected(self, rng, tmp_path):
        pm = PointMap(points=rng.standard_normal((4, 4, 3)), valid=np.ones((4, 4), bool))
        path = tmp_path / "t.pts"
        save_pointmap(pm, 0, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 10])
        with pytest.raises(LoadError):
            load_pointmap(path)


class TestPlyExport:
    def test_header_and_vertex_count(self, rng, tmp_path):
        valid = rng.random((6, 8)) > 0.3
        pm = PointMap(points=rng.standard_normal((6, 8, 3)), valid=valid)
        image = rng.random((6, 8, 3))
        path = tmp_path / "out.ply"
        count = export_ply(pm, image, path)
        assert count == int(valid.sum())

        lines = path.read_text().splitlines()
        assert lines[0] == "ply"
        assert lines[1] == "format ascii 1.0"
        assert f"element vertex {count}" in lines
        header_end = lines.index("end_header")
        body = lines[header_end + 1 :]
        assert len(body) == count
        first = body[0].split()
        assert len(first) == 6
        [float(v) for v in first[:3]]
        assert all(0 <= int(c) <= 255 for c in first[3:])
