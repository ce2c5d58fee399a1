import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_score

from bwuda import sealing
from bwuda.data import (
    TABLE1_COUNTS,
    BundleFormatError,
    CorruptHeaderError,
    DataError,
    DesignSample,
    GeneratorConfig,
    LabeledDomain,
    ShapeMismatchError,
    VersionMismatchError,
    VoxelGrid,
    fit_label_scaler,
    generate_benchmark,
    load_bundle,
    pseudo_fea_oracle,
    save_bundle,
    split_domain,
    voxelize,
)
from bwuda.data.generator import ShapeParams, generate_sample
from bwuda.data.io import read_manifest


@pytest.fixture(scope="module")
def small():
    return generate_benchmark(GeneratorConfig(samples_per_domain=[24] * 5, seed=3))


def _shape(**kw):
    base = dict(
        n_spokes=5, phase=0.1, spoke_half_width=0.14, spoke_taper=0.2, spoke_depth=0.6,
        rim_thickness=0.25, rim_taper=0.0, rim_bump=0.0, rim_bump_center=0.0,
    )
    base.update(kw)
    return ShapeParams(**base)


def _sample(mass=528.0, resolution=16, **kw):
    return DesignSample(VoxelGrid(voxelize(_shape(**kw), resolution), 480.0 / resolution), mass)


# ---- generator


def test_generation_is_deterministic(small):
    again = generate_benchmark(GeneratorConfig(samples_per_domain=[24] * 5, seed=3))
    assert again == small
    other = generate_benchmark(GeneratorConfig(samples_per_domain=[24] * 5, seed=4))
    assert other != small


def test_parallel_generation_matches_serial():
    cfg = GeneratorConfig(samples_per_domain=[6, 5, 4], num_domains=3, seed=9)
    assert generate_benchmark(cfg, workers=2) == generate_benchmark(cfg)


def test_table1_counts_are_reproduced_at_desk_resolution():
    # counts of the original five rim types; generated at 16^3 to keep the test fast
    cfg = GeneratorConfig(samples_per_domain=list(TABLE1_COUNTS), resolution=16, mass_range_kg=(498, 558))
    b = generate_benchmark(cfg)
    assert [len(d) for d in b.sources] == [271, 332, 469, 467, 476]
    assert all(498 <= m <= 558 for d in b.sources for m in d.masses)


def test_every_label_is_the_oracle_of_its_sample_and_lies_in_the_box(small):
    cfg = GeneratorConfig(samples_per_domain=[24] * 5, seed=3)
    for di, d in enumerate(small.sources):
        lo, hi = VoxelGrid(d.voxels[0], d.cell_size_mm).bounds_mm()
        assert np.all(d.labels[:, 3] > 0)
        assert np.all((d.labels[:, :3] >= lo) & (d.labels[:, :3] <= hi))
        for i in (0, len(d) - 1):
            relabel = pseudo_fea_oracle(DesignSample(VoxelGrid(d.voxels[i], d.cell_size_mm), d.masses[i]))
            assert np.array_equal(relabel.as_array(), d.labels[i])
            _, _, stored = generate_sample(cfg, di, i)
            assert np.array_equal(stored, d.labels[i])


def test_domains_are_shifted_for_a_linear_probe():
    b = generate_benchmark(GeneratorConfig(num_domains=3, samples_per_domain=[20, 20, 20], resolution=16, seed=0))
    for a in range(3):
        for c in range(a + 1, 3):
            X = np.concatenate([b.sources[a].voxels, b.sources[c].voxels]).reshape(40, -1).astype(float)
            y = np.r_[np.zeros(20), np.ones(20)]
            cv = StratifiedKFold(5, shuffle=True, random_state=0)
            acc = cross_val_score(LogisticRegression(max_iter=2000), X, y, cv=cv).mean()
            assert acc > 0.8, (a, c, acc)


def test_label_marginals_differ_between_domains(small):
    means = [d.labels[:, 3].mean() for d in small.sources]
    assert max(means) - min(means) > 30.0


@pytest.mark.parametrize(
    "kw",
    [
        dict(samples_per_domain=[10, 10]),
        dict(mass_range_kg=(558, 498)),
        dict(resolution=4),
        dict(num_domains=0, samples_per_domain=[]),
        dict(samples_per_domain=[10, 0, 10, 10, 10]),
    ],
)
def test_invalid_configs_are_rejected(kw):
    with pytest.raises(DataError):
        GeneratorConfig(**kw)


def test_config_round_trips_through_dict_and_rejects_unknown_keys():
    cfg = GeneratorConfig(samples_per_domain=[3] * 5, seed=11)
    assert GeneratorConfig.from_dict(cfg.to_dict()).digest() == cfg.digest()
    with pytest.raises(DataError):
        GeneratorConfig.from_dict({"resolutoin": 16})


# ---- oracle


@settings(max_examples=30, deadline=None)
@given(st.floats(0.09, 0.2), st.floats(0.15, 0.33), st.floats(498, 557))
def test_stress_increases_with_mass_for_fixed_geometry(width, rim, mass):
    s_lo = _sample(mass, spoke_half_width=width, rim_thickness=rim)
    s_hi = DesignSample(s_lo.voxel, mass + 1.0)
    a, b = pseudo_fea_oracle(s_lo), pseudo_fea_oracle(s_hi)
    assert b.vm_mpa > a.vm_mpa
    assert (a.x_mm, a.y_mm, a.z_mm) == (b.x_mm, b.y_mm, b.z_mm)


def test_mass_endpoints():
    lo, hi = pseudo_fea_oracle(_sample(498.0)), pseudo_fea_oracle(_sample(558.0))
    assert hi.vm_mpa > lo.vm_mpa
    assert hi.vm_mpa / lo.vm_mpa == pytest.approx(558.0 / 498.0)


def test_mirror_symmetric_design_resolves_to_positive_x_deterministically():
    # four spokes at +-45 degrees about the loaded +y axis: two mirror candidates
    s = _sample(n_spokes=4, phase=math.pi / 4, spoke_taper=0.0)
    occ = s.voxel.occupancy
    assert np.array_equal(occ, occ[::-1, :, :])
    first, second = pseudo_fea_oracle(s), pseudo_fea_oracle(s)
    assert first == second
    assert first.x_mm > 0


def test_thinner_rim_raises_stress():
    thick = pseudo_fea_oracle(_sample(rim_thickness=0.30))
    thin = pseudo_fea_oracle(_sample(rim_thickness=0.15))
    assert thin.vm_mpa > thick.vm_mpa


def test_oracle_rejects_designs_without_a_load_path():
    occ = np.zeros((16, 16, 16), dtype=np.uint8)
    occ[8, 8, 8] = 1  # a lone hub cell, nothing in the spoke band
    with pytest.raises(DataError):
        pseudo_fea_oracle(DesignSample(VoxelGrid(occ, 30.0), 500.0))
    with pytest.raises(DataError):
        VoxelGrid(np.zeros((16, 16, 16)), 30.0)


# ---- split and scaler


def _domain(n, seed=0):
    gen = np.random.default_rng(seed)
    vox = (gen.random((n, 8, 8, 8)) < 0.5).astype(np.uint8)
    vox[:, 0, 0, 0] = 1
    return LabeledDomain("d", vox, gen.uniform(498, 558, n), gen.normal(100, 20, (n, 4)), 30.0)


@pytest.mark.parametrize("n,frac,sizes", [(100, 0.2, (80, 20)), (5, 0.2, (4, 1))])
def test_split_sizes_disjoint_exhaustive(n, frac, sizes):
    d = _domain(n)
    tr, va = split_domain(d, frac, seed=1)
    assert (len(tr), len(va)) == sizes
    rows = {m for m in tr.masses} | {m for m in va.masses}
    assert len(rows) == n
    tr2, va2 = split_domain(d, frac, seed=1)
    assert tr2 == tr and va2 == va


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
def test_split_rejects_bad_fraction(frac):
    with pytest.raises(DataError):
        split_domain(_domain(10), frac, seed=0)


def test_scaler_matches_two_pass_statistics_and_round_trips():
    doms = [_domain(30, 1), _domain(17, 2)]
    sc = fit_label_scaler(doms)
    vm = [row[3] for d in doms for row in d.labels]
    mean = sum(vm) / len(vm)
    var = sum((v - mean) ** 2 for v in vm) / len(vm)
    assert abs(sc.mean[3] - mean) <= 1e-9 * abs(mean)
    assert abs(sc.std[3] - math.sqrt(var)) <= 1e-9 * math.sqrt(var)
    y = np.random.default_rng(5).normal(200, 50, (40, 4))
    assert np.allclose(sc.invert(sc.apply(y)), y, rtol=1e-9, atol=0)
    scaled = sc.apply(np.concatenate([d.labels for d in doms]))
    assert np.allclose(scaled.mean(0), 0, atol=1e-12) and np.allclose(scaled.std(0), 1)


def test_scaler_names_the_zero_variance_output():
    d = _domain(10)
    d.labels[:, 3] = 300.0
    with pytest.raises(DataError, match="vm_mpa"):
        fit_label_scaler([d])


# ---- persistence


def test_bundle_round_trip_including_table1_sized_bundle(tmp_path, small):
    path = save_bundle(small, tmp_path / "b")
    back = load_bundle(path)
    assert back == small and back.resolution == 16
    assert read_manifest(path)["resolution"] == 16
    big = generate_benchmark(GeneratorConfig(samples_per_domain=list(TABLE1_COUNTS), seed=1))
    assert load_bundle(save_bundle(big, tmp_path / "big")) == big


def test_leave_out_round_trip_keeps_target_labels_sealed(tmp_path, small):
    task = small.leave_out("rim3")
    back = load_bundle(save_bundle(task, tmp_path / "t"))
    assert back == task and len(back.sources) == 4
    with sealing.sealed("test"):
        with pytest.raises(sealing.TargetLabelAccessError):
            _ = back.target_eval_labels


def _first_voxel_file(path):
    return sorted(path.rglob("*.bin"))[0]


def test_truncated_voxel_file_is_a_corrupt_header(tmp_path, small):
    path = save_bundle(small, tmp_path / "b")
    f = _first_voxel_file(path)
    f.write_bytes(f.read_bytes()[:5])
    with pytest.raises(CorruptHeaderError):
        load_bundle(path)


def test_shape_mismatch_and_version_mismatch_are_distinct(tmp_path, small):
    import json

    path = save_bundle(small, tmp_path / "b")
    man = path / "manifest.json"
    d = json.loads(man.read_text())
    d["domains"][0]["count"] += 1
    man.write_text(json.dumps(d))
    with pytest.raises(ShapeMismatchError):
        load_bundle(path)

    path2 = save_bundle(small, tmp_path / "c")
    man = path2 / "manifest.json"
    d = json.loads(man.read_text())
    d["version"] = 999
    man.write_text(json.dumps(d))
    with pytest.raises(VersionMismatchError):
        load_bundle(path2)
    assert issubclass(VersionMismatchError, BundleFormatError)


def test_save_refuses_to_overwrite(tmp_path, small):
    path = save_bundle(small, tmp_path / "b")
    with pytest.raises(FileExistsError):
        save_bundle(small, path)
    save_bundle(small, path, overwrite=True)
