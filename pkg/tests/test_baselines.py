import csv
import dataclasses
from pathlib import Path

import numpy as np
import pytest
import torch

from bwuda import baselines as B
from bwuda import trainer as T
from bwuda.config import load_config
from bwuda.data import DEFAULT_PROFILES, GeneratorConfig, generate_benchmark
from bwuda.evaluation import alignment_probe
from bwuda.networks import init_model

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk.json"
CFG = T.TrainConfig(max_epochs=3, patience=3, batch_size=16, perplexity=10.0)


@pytest.fixture(scope="module")
def bench():
    return generate_benchmark(GeneratorConfig(num_domains=3, samples_per_domain=[40, 40, 40], seed=2))


@pytest.fixture(scope="module")
def task(bench):
    return bench.leave_out("rim3")


def _rows(r):
    return [(l.epoch, l.src_risk, l.hdisc, l.feat_disc, l.val_criterion) for l in r.logs]


def test_method_enumeration_is_closed(task):
    assert set(B.METHODS) == {"plain", "dann", "ahd_msda", "proposed_no_weights", "proposed_geo_only", "proposed_eng_only", "proposed_both"}
    with pytest.raises(ValueError):
        B.train_method("cyclegan", task, init_model(seed=0), CFG)


def test_dann_ramp_values():
    assert B.dann_lambda(0.0) == 0.0
    assert B.dann_lambda(1.0) == pytest.approx(2 / (1 + np.exp(-10)) - 1)
    ps = np.linspace(0, 1, 11)
    assert np.all(np.diff([B.dann_lambda(p) for p in ps]) > 0)


def test_reversal_at_zero_lambda_sends_no_gradient_to_the_extractor():
    m = init_model(seed=0)
    clf = B.DomainClassifier(30)
    z = m.theta(torch.rand(4, 1, 16, 16, 16))
    loss = torch.nn.functional.binary_cross_entropy_with_logits(clf(B.grad_reverse(z, 0.0)), torch.tensor([0.0, 0, 1, 1]))
    loss.backward()
    assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in m.theta.parameters())
    assert any(p.grad is not None and torch.count_nonzero(p.grad) > 0 for p in clf.parameters())


def test_reversal_flips_and_scales_the_gradient():
    x = torch.randn(5, 3, requires_grad=True)
    (B.grad_reverse(x, 0.7) * torch.arange(15.0).reshape(5, 3)).sum().backward()
    assert torch.allclose(x.grad, -0.7 * torch.arange(15.0).reshape(5, 3))


@pytest.mark.parametrize("method", ["plain", "dann", "ahd_msda"])
def test_baselines_are_deterministic_per_seed(task, method):
    a = B.train_method(method, task, init_model(seed=3), dataclasses.replace(CFG, seed=3))
    b = B.train_method(method, task, init_model(seed=3), dataclasses.replace(CFG, seed=3))
    assert _rows(a) == _rows(b)
    for (k, x), (_, y) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(x, y), k


def test_plain_regression_never_touches_the_target(task, monkeypatch):
    seen = []
    orig = T.prepare

    def spy(bundle, model, config):
        data = orig(bundle, model, config)
        data.tgt_vox.fill_(float("nan"))  # any use of target voxels would poison the losses
        seen.append(True)
        return data

    monkeypatch.setattr(B, "prepare", spy)
    r = B.train_plain_regression(task, init_model(seed=0), CFG)
    assert seen and all(np.isfinite(l.src_risk) for l in r.logs)


def test_ahd_weights_stay_positive_and_sum_to_k(task):
    r = B.train_ahd_msda(task, init_model(seed=0), dataclasses.replace(CFG, max_epochs=4, patience=4))
    hist = np.array(r.history["domain_weights"])
    assert hist.shape == (4, 2)
    assert np.all(hist > 0)
    assert np.allclose(hist.sum(1), 2.0, atol=1e-6)


def test_ahd_with_one_source_domain_is_the_no_weights_run():
    b = generate_benchmark(GeneratorConfig(num_domains=2, samples_per_domain=[50, 50], seed=4)).leave_out("rim2")
    cfg = dataclasses.replace(CFG, seed=1)
    ahd = B.train_ahd_msda(b, init_model(seed=1), cfg)
    none = T.fit(b, init_model(seed=1), cfg, "none")
    assert all(w == [1.0] for w in ahd.history["domain_weights"])
    assert _rows(ahd) == _rows(none)


def test_ahd_weights_move_away_from_uniform_when_one_source_copies_the_target():
    far, near = DEFAULT_PROFILES[0], DEFAULT_PROFILES[3]
    twin = dataclasses.replace(near, domain_id="twin")
    b = generate_benchmark(GeneratorConfig(num_domains=3, samples_per_domain=[60, 60, 60], domain_profile_params=[far, near, twin], seed=0))
    r = B.train_ahd_msda(b.leave_out("twin"), init_model(seed=0), dataclasses.replace(CFG, batch_size=8, max_epochs=20, patience=20))
    final = np.array(r.history["domain_weights"][-1])
    assert final.max() / final.min() > 1.1, final


def test_dann_reduces_domain_separability_of_the_latents():
    cfg = load_config(DESK)
    task = generate_benchmark(cfg.generator).leave_out("rim1")
    untrained = init_model(seed=0)
    T.prepare(task, untrained, cfg.train)  # fits the scalers, as training would
    before = alignment_probe(untrained, task, seed=0)
    r = B.train_dann_regression(task, init_model(seed=0), cfg.train)
    after = alignment_probe(r.model, task, seed=0)
    assert after < before, (before, after)


def test_dann_records_held_out_domain_accuracy_each_epoch(task):
    r = B.train_dann_regression(task, init_model(seed=0), CFG)
    acc = r.history["domain_accuracy"]
    assert len(acc) == len(r.logs)
    assert all(0.0 <= a <= 1.0 for a in acc)


def test_no_shift_plain_regression_is_accurate():
    base = DEFAULT_PROFILES[0]
    twin = dataclasses.replace(base, domain_id="twin")
    b = generate_benchmark(GeneratorConfig(num_domains=2, samples_per_domain=[400, 400], domain_profile_params=[base, twin], seed=5))
    cfg = dataclasses.replace(load_config(DESK).train, max_epochs=60, patience=60)
    for seed in (0, 1, 2):
        cell = B.run_cell(b, "plain", "twin", seed, cfg)
        assert cell.report.mape_vm_pct < 10.0, (seed, cell.report.mape_vm_pct)


def test_grid_cell_count_order_and_csv_shape(bench, tmp_path):
    methods = ["proposed_no_weights", "plain"]
    cfg = dataclasses.replace(CFG, max_epochs=1, patience=1)
    cells = B.run_grid(bench, methods, bench.domain_ids, [0, 1], cfg)
    assert len(cells) == 2 * 3 * 2
    assert [c.method for c in cells[:6]] == ["proposed_no_weights"] * 6
    rows = B.seed_rows(cells)
    assert len(rows) == 4
    path = B.write_results_csv(rows, tmp_path / "r.csv")
    with open(path) as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == B.RESULT_COLUMNS
    summary = B.summarize(rows)
    assert [s["method"] for s in summary] == methods
    m = [r["mape_vm"] for r in rows if r["method"] == "plain"]
    assert summary[1]["mape_vm_mean"] == pytest.approx(np.mean(m))
    assert summary[1]["mape_vm_std"] == pytest.approx(np.std(m))


def test_ablation_has_exactly_the_four_variant_rows(bench):
    cfg = dataclasses.replace(CFG, max_epochs=1, patience=1)
    _, rows, summary = B.run_ablation(bench, cfg, seeds=(0,), targets=["rim1"])
    assert [s["method"] for s in summary] == list(B.ABLATION_VARIANTS)
    assert len(rows) == 4


def test_parallel_grid_matches_serial(bench):
    cfg = dataclasses.replace(CFG, max_epochs=1, patience=1)
    serial = B.run_grid(bench, ["plain"], ["rim1", "rim2"], [0], cfg)
    parallel = B.run_grid(bench, ["plain"], ["rim1", "rim2"], [0], cfg, workers=2)
    assert [c.row() for c in serial] == [c.row() for c in parallel]
