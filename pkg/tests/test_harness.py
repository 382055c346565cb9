import math

import numpy as np
import pytest

from boxmil import harness
from boxmil.data import SyntheticSpec, generate_synthetic, save_dataset
from boxmil.harness import EvalReport, TrainConfig
from boxmil.model import load_checkpoint
from boxmil.validation import FormatError

TINY = dict(channels=(4, 4, 4), epochs=2, batch_size=4, n_r=6, n_theta=12, angles="-30,30,30")


@pytest.fixture(scope="module")
def tiny_data():
    spec = SyntheticSpec(count=8, height=16, width=16, size_range=(6, 10), shapes_per_image=(1, 1),
                         seed=1)
    train = generate_synthetic(spec)
    val = generate_synthetic(SyntheticSpec(**{**spec.__dict__, "count": 4, "seed": 2}))
    return train, val


def test_parse_kv_comments_and_order():
    got = harness.parse_kv("# header\nb = 2  # trailing\n\na=x = y\n")
    assert list(got.items()) == [("b", "2"), ("a", "x = y")]


@pytest.mark.parametrize("text, msg", [("a = 1\na = 2\n", "cfg:2: duplicate"),
                                       ("a = 1\njunk\n", "cfg:2: expected"),
                                       (" = 3\n", "cfg:1: empty key")])
def test_parse_kv_errors_carry_line_numbers(text, msg):
    with pytest.raises(FormatError, match=msg):
        harness.parse_kv(text, "cfg")


def test_config_round_trip():
    cfg = TrainConfig(method="baseline", lr=3e-4, channels=(4, 8, 8), perturb="U(0,6)", seed=3)
    back = TrainConfig.from_kv(harness.parse_kv(cfg.to_text()))
    assert back == cfg
    assert back.fingerprint() == cfg.fingerprint()


def test_fingerprint_ignores_data_paths_only():
    cfg = TrainConfig()
    assert cfg.with_(train_data="/a", val_data="/b").fingerprint() == cfg.fingerprint()
    assert cfg.with_(seed=1).fingerprint() != cfg.fingerprint()
    assert len(cfg.fingerprint()) == 12


@pytest.mark.parametrize("text", ["bogus = 1\n", "lr = fast\n", "method = magic\n", "lr = -1\n",
                                  "kind = mean:2\n", "perturb = U(3,1)\n", "group_by = patient\n"])
def test_config_rejects_bad_values(text):
    with pytest.raises(FormatError):
        TrainConfig.from_kv(harness.parse_kv(text))


def test_missing_config_file(tmp_path):
    with pytest.raises(FormatError):
        TrainConfig.read(tmp_path / "nope.txt")


def test_synthetic_spec_keys():
    spec, perturb, seed = harness.synthetic_spec_from_kv(harness.parse_kv(
        "count = 3\nkinds = ellipse, blob\nsize_range = 8,12\nperturb = U(0,4)\nperturb_seed = 9\n"))
    assert spec.count == 3 and spec.kinds == ("ellipse", "blob") and spec.size_range == (8, 12)
    assert str(perturb) == "U(0,4)" and seed == 9


def test_group_ids(tiny_data):
    train, _ = tiny_data
    np.testing.assert_array_equal(harness.group_ids(train, "volume"), [0, 0, 0, 0, 1, 1, 1, 1])
    np.testing.assert_array_equal(harness.group_ids(train, "image"), np.arange(8))


def test_train_writes_run_directory(tmp_path, tiny_data):
    train, val = tiny_data
    cfg = TrainConfig(**TINY)
    result = harness.train(cfg, tmp_path, train, val)
    names = {p.name for p in tmp_path.iterdir()}
    assert names == {"config.txt", "metrics.csv", "steps.csv", "origins.csv", "best.ckpt",
                     "final.ckpt"}
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss,val_dice_mean,val_dice_std"
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "1", "2"]
    assert TrainConfig.read(tmp_path / "config.txt") == cfg
    best = load_checkpoint(tmp_path / "best.ckpt")
    report = harness.evaluate(best, val, "volume")
    assert report.mean == pytest.approx(result.report.mean)
    assert report.mean == pytest.approx(max(r["val_dice_mean"] for r in result.estimator.history_))


def test_metrics_are_byte_identical_on_rerun(tmp_path, tiny_data):
    train, val = tiny_data
    cfg = TrainConfig(**TINY, perturb="U(0,3)", perturb_seed=4)
    harness.train(cfg, tmp_path / "a", train, val)
    harness.train(cfg, tmp_path / "b", train, val)
    for name in ("metrics.csv", "steps.csv", "origins.csv", "best.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_from_config_paths(tmp_path, tiny_data):
    train, val = tiny_data
    save_dataset(train, tmp_path / "tr")
    save_dataset(val, tmp_path / "va")
    cfg = TrainConfig(**TINY, method="baseline", train_data=str(tmp_path / "tr"),
                      val_data=str(tmp_path / "va"), group_by="image")
    report = harness.run_experiment(cfg).report
    assert report.ok and len(report.dice) == 4


def test_grid_product_in_file_order():
    grid = harness.parse_grid(harness.parse_kv("kind = softmax:4 | softmax:6 | quasimax:4\n"
                                               "lam = 1 | 10\n"))
    configs = harness.grid_configs(TrainConfig(), grid)
    assert len(configs) == 6
    assert [(c.kind, c.lam) for c in configs[:3]] == [("softmax:4", 1.0), ("softmax:4", 10.0),
                                                      ("softmax:6", 1.0)]
    with pytest.raises(FormatError):
        harness.parse_grid({"nope": "1|2"})
    with pytest.raises(FormatError):
        harness.parse_grid({"lam": "1||2"})


def test_single_point_grid_equals_train(tmp_path, tiny_data):
    train, val = tiny_data
    cfg = TrainConfig(**TINY)
    (only,) = harness.grid_search(cfg, {"seed": ["0"]}, train, val)
    direct = harness.run_experiment(cfg, train, val).report
    assert only[0] == cfg
    assert only[1].dice == direct.dice


def test_no_op_grid_points_tie(tiny_data):
    train, val = tiny_data
    ranked = harness.grid_search(TrainConfig(**TINY), {"perturb": ["0", "U(0,0)"]}, train, val)
    assert [c.perturb for c, _ in ranked] == ["0", "U(0,0)"]
    assert ranked[0][1].dice == ranked[1][1].dice


def test_failed_trials_rank_last(tiny_data):
    train, val = tiny_data
    ranked = harness.grid_search(TrainConfig(**TINY), {"channels": ["4,4,4", "4,4"]}, train, val)
    assert ranked[0][1].ok
    assert not ranked[1][1].ok and "ContractError" in ranked[1][1].error
    assert "FAILED" in ranked[1][1].summary()


def test_rank_reports_orders_by_dice_then_grid_order():
    r = [EvalReport([0.5], 0.5, 0.0), EvalReport([], math.nan, math.nan, error="x"),
         EvalReport([0.9], 0.9, 0.0), EvalReport([0.5], 0.5, 0.0)]
    assert harness.rank_reports(r) == [r[2], r[0], r[3], r[1]]


def test_evaluate_checks_category_count(tiny_data):
    from boxmil.model import init_params
    from boxmil.validation import ContractError

    with pytest.raises(ContractError):
        harness.evaluate(init_params(0, (4, 4, 4), n_classes=2), tiny_data[1])
