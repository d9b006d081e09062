import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trihorn.camera import xyz_to_uvd
from trihorn.config import ConfigError
from trihorn.data import (JOINT_NAMES, MANIFEST_NAME, DatasetError, SynthSpec, frames_equal,
                          generate_frame, generate_frame_detailed, generate_frames, load_dataset,
                          load_synth_spec, read_manifest, split_by_subject, write_dataset)


def ray_sphere_depth(u, v, K, center, r):
    """z of the first hit of the pixel ray through (u, v) on a sphere, or None."""
    d = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    # points on the ray are z * d; solve |z d - c|^2 = r^2 for z
    a = d @ d
    b = -2 * d @ center
    c = center @ center - r * r
    disc = b * b - 4 * a * c
    if disc < 0:
        return None
    return (-b - math.sqrt(disc)) / (2 * a)


@pytest.fixture(scope="module")
def small_spec():
    return SynthSpec(n_frames=6, rng_seed=3)


class TestSpec:
    def test_defaults(self):
        s = SynthSpec()
        assert s.n_joints == 14 and len(s.joint_names) == 14
        assert s.joint_names[0] == "wrist"

    @pytest.mark.parametrize("J", [1, 5, 14, 16, 21])
    def test_joint_subsets(self, J):
        names = SynthSpec(n_joints=J).joint_names
        assert len(names) == J and set(names) <= set(JOINT_NAMES)

    @pytest.mark.parametrize("kw", [dict(n_joints=0), dict(n_joints=22), dict(width=32),
                                    dict(depth_range=(400.0, 300.0)), dict(jitter_mm=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SynthSpec(**kw)

    def test_load_spec_file(self, tmp_path):
        p = tmp_path / "spec.txt"
        p.write_text("# generator\nn_joints = 16\nn_frames = 3\ndepth_range = 300, 420\n", encoding="utf-8")
        s = load_synth_spec(p, rng_seed=9)
        assert (s.n_joints, s.n_frames, s.depth_range, s.rng_seed) == (16, 3, (300.0, 420.0), 9)

    def test_load_spec_unknown_key(self, tmp_path):
        p = tmp_path / "spec.txt"
        p.write_text("n_joints = 14\ncolour = blue\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="line 2"):
            load_synth_spec(p)


class TestGenerator:
    def test_deterministic(self, small_spec):
        a, b = generate_frame(small_spec, 4), generate_frame(small_spec, 4)
        assert a.depth.tobytes() == b.depth.tobytes()
        assert np.asarray(a.joints_xyz).tobytes() == np.asarray(b.joints_xyz).tobytes()

    def test_indices_differ(self, small_spec):
        assert not np.array_equal(generate_frame(small_spec, 0).depth, generate_frame(small_spec, 1).depth)

    def test_count_and_joints(self, small_spec):
        frames = list(generate_frames(small_spec))
        assert len(frames) == 6
        assert all(np.asarray(f.joints_xyz).shape == (14, 3) for f in frames)
        assert [f.id for f in frames] == [f"f{i:06d}" for i in range(6)]

    @pytest.mark.parametrize("index", range(8))
    def test_joints_inside_raster(self, index):
        spec = SynthSpec(n_frames=8, rng_seed=11, n_joints=21)
        f = generate_frame(spec, index)
        uvd = xyz_to_uvd(f.joints_xyz, f.intrinsics)
        assert np.all((uvd[:, 0] >= 0) & (uvd[:, 0] <= spec.width - 1))
        assert np.all((uvd[:, 1] >= 0) & (uvd[:, 1] <= spec.height - 1))
        lo, hi = spec.depth_range
        # the whole hand stays inside a 150 mm cube around the joint centroid
        assert np.all(np.abs(uvd[:, 2] - uvd[:, 2].mean()) < 150)
        assert lo - 150 < uvd[:, 2].mean() < hi + 150

    def test_projection_consistent(self, small_spec):
        f = generate_frame(small_spec, 2)
        np.testing.assert_allclose(f.joints_uvd, xyz_to_uvd(f.joints_xyz, f.intrinsics), atol=1e-3)

    @pytest.mark.parametrize("index", range(10))
    def test_unoccluded_joints_on_surface(self, index):
        spec = SynthSpec(n_frames=10, rng_seed=2)
        sf = generate_frame_detailed(spec, index)
        f, K = sf.frame, sf.frame.intrinsics
        uvd = xyz_to_uvd(f.joints_xyz, K)
        checked = 0
        for j, (u, v, z) in enumerate(uvd):
            col, row = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
            if sf.owner[row, col] != sf.joint_sphere[j]:
                continue  # another primitive is in front of this joint's pixel
            r = sf.joint_radius[j]
            hit = ray_sphere_depth(col, row, K, np.asarray(f.joints_xyz[j]), r)
            assert hit is not None
            assert abs(f.depth[row, col] - hit) < 1e-3 * hit
            # along the joint's own ray the visible surface is one radius in front
            assert abs(f.depth[row, col] - (z - r)) < 2.0
            checked += 1
        assert checked >= 1

    def test_depth_values_valid(self, small_spec):
        f = generate_frame(small_spec, 0)
        assert f.depth.dtype == np.float32
        assert np.all(f.depth >= 0) and np.count_nonzero(f.depth) > 500

    def test_jitter_only_on_hand(self):
        base = generate_frame(SynthSpec(n_frames=1, rng_seed=4), 0)
        noisy = generate_frame(SynthSpec(n_frames=1, rng_seed=4, jitter_mm=2.0), 0)
        np.testing.assert_array_equal(noisy.depth == 0, base.depth == 0)
        assert np.abs(noisy.depth - base.depth).max() <= 2.0 + 1e-3

    def test_subjects(self):
        spec = SynthSpec(n_frames=18, n_subjects=9)
        subjects = [generate_frame(spec, i).subject for i in range(18)]
        assert sorted(set(subjects)) == [f"s{i}" for i in range(9)]


class TestManifest:
    def test_round_trip(self, tmp_path, small_spec):
        frames = list(generate_frames(small_spec))
        manifest = write_dataset(frames, tmp_path)
        assert manifest.name == MANIFEST_NAME
        ds = load_dataset(manifest)
        assert len(ds) == len(frames) and ds.n_joints == 14
        for a, b in zip(frames, ds):
            assert frames_equal(a, b)

    def test_directory_accepted(self, tmp_path, small_spec):
        write_dataset(generate_frames(small_spec, 0, 2), tmp_path)
        assert len(load_dataset(tmp_path)) == 2

    def test_raster_layout(self, tmp_path, small_spec):
        f = generate_frame(small_spec, 0)
        write_dataset([f], tmp_path)
        rec = json.loads((tmp_path / MANIFEST_NAME).read_text(encoding="utf-8").splitlines()[0])
        raw = (tmp_path / rec["depth_file"]).read_bytes()
        assert len(raw) == rec["H"] * rec["W"] * 4
        np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(rec["H"], rec["W"]), f.depth)

    def test_truncated_file_names_frame(self, tmp_path, small_spec):
        write_dataset(generate_frames(small_spec, 0, 3), tmp_path)
        victim = tmp_path / "depth" / "f000001.f32"
        victim.write_bytes(victim.read_bytes()[:1000])
        ds = load_dataset(tmp_path)
        ds[0]
        with pytest.raises(DatasetError, match="f000001"):
            ds[1]

    def test_missing_file(self, tmp_path, small_spec):
        write_dataset(generate_frames(small_spec, 0, 2), tmp_path)
        (tmp_path / "depth" / "f000000.f32").unlink()
        with pytest.raises(DatasetError, match="missing"):
            list(load_dataset(tmp_path))

    def test_mixed_joint_counts_rejected(self, tmp_path):
        a = generate_frame(SynthSpec(n_frames=1, n_joints=14), 0)
        b = generate_frame(SynthSpec(n_frames=2, n_joints=16), 1)
        write_dataset([a, b], tmp_path)
        with pytest.raises(DatasetError, match="joints"):
            load_dataset(tmp_path)

    def test_malformed_line_number(self, tmp_path, small_spec):
        manifest = write_dataset(generate_frames(small_spec, 0, 3), tmp_path)
        lines = manifest.read_text(encoding="utf-8").splitlines()
        lines[1] = lines[1][:40]
        manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(DatasetError, match=":2:"):
            read_manifest(manifest)

    def test_missing_field(self, tmp_path, small_spec):
        manifest = write_dataset(generate_frames(small_spec, 0, 1), tmp_path)
        rec = json.loads(manifest.read_text(encoding="utf-8"))
        del rec["fx"]
        manifest.write_text(json.dumps(rec) + "\n", encoding="utf-8")
        with pytest.raises(DatasetError, match="fx"):
            read_manifest(manifest)

    def test_no_manifest(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)


class TestSplit:
    def test_single_subject(self, small_spec):
        frames = [generate_frame(SynthSpec(n_frames=3, n_subjects=1), i) for i in range(3)]
        train, test = split_by_subject(frames, "s0")
        assert train == [] and len(test) == 3

    def test_missing_subject(self, small_spec):
        f = generate_frame(small_spec, 0)
        f.subject = None
        with pytest.raises(DatasetError, match="subject"):
            split_by_subject([f], "s0")

    def test_nine_subjects_partition(self):
        frames = list(generate_frames(SynthSpec(n_frames=27, n_subjects=9, width=64, height=64,
                                                fx=120.0, fy=120.0, cx=32.0, cy=32.0)))
        train, test = split_by_subject(frames, "s3")
        assert len(train) + len(test) == 27 and len(test) == 3
        assert all(f.subject == "s3" for f in test)
        assert all(f.subject != "s3" for f in train)
        assert {f.id for f in train}.isdisjoint({f.id for f in test})

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from(["a", "b", "c"]), min_size=0, max_size=20), st.sampled_from(["a", "b", "z"]))
    def test_partition_property(self, labels, held):
        class F:
            def __init__(self, i, s):
                self.id, self.subject = i, s
        frames = [F(i, s) for i, s in enumerate(labels)]
        train, test = split_by_subject(frames, held)
        assert sorted(f.id for f in train + test) == list(range(len(labels)))
        assert all(f.subject == held for f in test) and all(f.subject != held for f in train)
