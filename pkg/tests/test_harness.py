import json
import math
import re
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gscsim import nn
from gscsim.harness import checkpoint as ck
from gscsim.harness import config as cfgmod
from gscsim.harness import data as D
from gscsim.harness import report as R
from gscsim.harness.cli import main
from gscsim.harness.pipeline import MissingCheckpoint, Pipeline, StageError
from gscsim.harness.seeds import derive_seed, seed_list, stage_rng
from gscsim.metrics import MetricRecord
from gscsim.tensor import ShapeError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY = CONFIGS / "tiny.ini"


# -- data ----------------------------------------------------------------------------------------
def test_dataset_is_deterministic():
    a = D.synth_dataset(D.all_specs()[:5], "cloud", 7, seed=3)
    b = D.synth_dataset(D.all_specs()[:5], "cloud", 7, seed=3)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert a[0].shape == (7, 3, 32, 32) and a[1].shape == (7, 4)
    assert a[0].min() >= 0 and a[0].max() <= 1


@pytest.mark.parametrize("spec", D.all_specs()[::7])
def test_styles_differ_visibly(spec):
    cloud = D.render(spec, "cloud", np.random.default_rng(0))
    edge = D.render(spec, "edge", np.random.default_rng(0))
    assert np.mean(np.any(np.abs(cloud - edge) > 1e-6, axis=0)) >= 0.01


def test_tokens_match_prompt():
    spec = D.SUBJECTS[0]
    assert nn.detokenize(spec.tokens(), D.VOCAB) == spec.prompt
    with pytest.raises(ValueError):
        D.SubjectSpec("dragon", "red")
    with pytest.raises(ValueError):
        D.render(spec, "sketch", np.random.default_rng(0))


# -- seeds -----------------------------------------------------------------------------------------
def test_seed_derivation():
    assert derive_seed(0, "a", 1) == derive_seed(0, "a", 1)
    assert len({derive_seed(0, "a", 0), derive_seed(0, "a", 1), derive_seed(0, "b", 0), derive_seed(1, "a", 0)}) == 4
    assert seed_list(5, "x", 3) == [derive_seed(5, "x", i) for i in range(3)]
    assert 0 <= derive_seed(2**64 - 1, "x") < 2**64
    np.testing.assert_array_equal(stage_rng(1, "s").random(3), stage_rng(1, "s").random(3))


# -- checkpoints -------------------------------------------------------------------------------------
def test_checkpoint_roundtrip_is_bit_exact(tmp_path, rng):
    layer = nn.Conv2d(2, 3, 3, rng)
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(layer, path, {"note": "x"}, extra={"steps": np.array([1, 2])})
    other = nn.Conv2d(2, 3, 3, np.random.default_rng(99))
    arrays, meta = ck.load_arrays(path)
    other.load_state_dict({k: v for k, v in arrays.items() if k != "steps"})
    np.testing.assert_array_equal(other.weight.data, layer.weight.data)
    assert meta == {"note": "x"}
    assert arrays["steps"].dtype == np.int64


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "a.ckpt"
    ck.save_arrays(path, {"w": np.arange(10.0)})
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ck.CheckpointError, match="truncated payload"):
        ck.load_arrays(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ck.CheckpointError, match="bad magic"):
        ck.load_arrays(tmp_path / "m.ckpt")
    (tmp_path / "v.ckpt").write_bytes(raw[:8] + (2).to_bytes(4, "little") + raw[12:])
    with pytest.raises(ck.CheckpointError, match="version 2"):
        ck.load_arrays(tmp_path / "v.ckpt")
    (tmp_path / "s.ckpt").write_bytes(raw[:5])
    with pytest.raises(ck.CheckpointError, match="truncated prefix"):
        ck.load_arrays(tmp_path / "s.ckpt")


def test_checkpoint_state_mismatch(tmp_path, rng):
    path = tmp_path / "d.ckpt"
    ck.save_checkpoint(nn.Dense(3, 2, rng), path)
    with pytest.raises(ShapeError):
        ck.load_checkpoint(nn.Conv2d(3, 2, 3, rng), path)
    ck.save_arrays(path, {"weight": np.zeros((2, 3))})
    with pytest.raises(KeyError, match="bias"):
        ck.load_checkpoint(nn.Dense(3, 2, rng), path)


def test_prefixed():
    out = ck.prefixed({"a.x": 1, "a.y": 2, "ab.z": 3}, "a")
    assert out == {"x": 1, "y": 2}


# -- config -------------------------------------------------------------------------------------------
def test_default_config_matches_desk_file():
    assert cfgmod.dumps(cfgmod.load(CONFIGS / "desk.ini")) == cfgmod.dumps(cfgmod.ExperimentConfig())


def test_config_parsing():
    cfg = cfgmod.loads("""
[tka]
rates = 8, 16/3, 4
groups = 0, 5 | 10, 15, 20, 25
group_ranks = 4, 4
skip_groups =
[latent_codec]
use_discriminator = yes
""")
    assert cfg.tka.rates == (Fraction(8), Fraction(16, 3), Fraction(4))
    assert cfg.tka.groups == ((0.0, 5.0), (10.0, 15.0, 20.0, 25.0))
    assert cfg.tka.skip_groups == ()
    assert cfg.latent_codec.use_discriminator is True
    assert [cfg.rate_plan().K(p) for p in range(3)] == [32, 48, 64]


def test_config_roundtrip():
    cfg = cfgmod.load(TINY)
    assert cfgmod.dumps(cfgmod.loads(cfgmod.dumps(cfg))) == cfgmod.dumps(cfg)


@pytest.mark.parametrize("text,match", [
    ("[tka]\nrates = 3\n", "non-integral"),
    ("[tka]\ngroups = 0, 5 | 10, 15\n", "partition"),
    ("[jscc]\nwidth = 8\nfoo = 1\n", "unknown key"),
    ("[nope]\nx = 1\n", "unknown config section"),
    ("[gka]\nmode = OTHER\n", "G-KA mode"),
    ("[diffusion]\nT_B = 0\n", "T_B"),
    ("[latent_codec]\nuse_discriminator = maybe\n", "boolean"),
])
def test_config_errors(text, match):
    with pytest.raises(ValueError, match=match):
        cfgmod.loads(text)


# -- CSV and SVG -------------------------------------------------------------------------------------
def _rec(metric="psnr", value=1.0, rate=0, snr=0.0, **kw):
    base = dict(run_id="r", stage="eval", epoch=-1, rate_index=rate, snr_db=snr, delay_spread_ns=300.0,
                metric=metric, value=value, seed=1)
    base.update(kw)
    return MetricRecord(**base)


def test_empty_csv_is_header_only():
    assert R.records_to_csv([]) == ",".join(R.COLUMNS) + "\n"
    assert R.parse_csv(R.records_to_csv([])) == []


finite = st.floats(allow_nan=False, allow_infinity=False)


@given(st.lists(st.tuples(finite, st.sampled_from([float("nan"), 0.0, -7.5]), st.integers(-1, 4)), max_size=6))
def test_csv_roundtrip(rows):
    recs = [_rec(value=v, snr=s, rate=p, metric="a,b \"q\"") for v, s, p in rows]
    back = R.parse_csv(R.records_to_csv(recs))
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        assert a.value == b.value and a.rate_index == b.rate_index and a.metric == b.metric
        assert (math.isnan(a.snr_db) and math.isnan(b.snr_db)) or a.snr_db == b.snr_db


def test_csv_rejects_bad_header():
    with pytest.raises(ValueError, match="header"):
        R.parse_csv("a,b\n1,2\n")


def test_line_svg_one_polyline_per_series():
    recs = [_rec(rate=p, snr=s, value=p + s) for p in range(5) for s in (0.0, 10.0, 20.0) for _ in range(2)]
    svg = R.line_svg(recs, R.PlotSpec(title="t"))
    assert len(re.findall(r'<polyline class="series"', svg)) == 5
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_box_svg_one_box_per_series():
    recs = [_rec(rate=p, value=v) for p in range(3) for v in (1.0, 2.0, 3.0)]
    svg = R.box_svg(recs, R.PlotSpec(kind="box"))
    assert svg.count('<g class="box"') == 3


def test_plot_errors(tmp_path):
    with pytest.raises(ValueError, match="no records"):
        R.line_svg([_rec(metric="x")], R.PlotSpec(metric="psnr"))
    with pytest.raises(ValueError):
        R.export_svg_plot([_rec()], R.PlotSpec(kind="pie"), tmp_path / "p.svg")


def test_image_grid(tmp_path, rng):
    from PIL import Image
    R.save_image_grid(tmp_path / "g.png", rng.random((5, 3, 8, 8)), cols=3, scale=2)
    assert Image.open(tmp_path / "g.png").size == (3 * 10 * 2, 2 * 10 * 2)


# -- pipeline and CLI -----------------------------------------------------------------------------------
STAGE_CMDS = ["synth-data", "pretrain-latent-codec", "train-cloud", "train-edge", "pretrain-jscc", "gka",
              "tka-rate", "tka-snr", "eval", "plot"]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    codes = [main(["-q", "--config", str(TINY), "--out", str(out), cmd]) for cmd in STAGE_CMDS]
    return out, codes


def test_tiny_pipeline_succeeds(tiny_run):
    out, codes = tiny_run
    assert codes == [0] * len(STAGE_CMDS)
    manifest = json.loads((out / "manifest.json").read_text())
    assert [s["stage"] for s in manifest["stages"]] == STAGE_CMDS
    for stage in STAGE_CMDS[:-1]:
        assert (out / "metrics" / f"{stage}.csv").exists()
    assert len(list((out / "plots").glob("*.svg"))) == 4
    evals = R.read_csv(out / "metrics" / "eval.csv")
    assert {r.metric for r in evals} >= {"psnr", "latent_mse"}
    assert {r.rate_index for r in evals} == set(range(5))


def test_transmit_demo(tiny_run, capsys):
    out, _ = tiny_run
    assert main(["-q", "--config", str(TINY), "--out", str(out), "transmit-demo", "--count", "2",
                 "--snr", "10"]) == 0
    png = Path(capsys.readouterr().out.strip())
    assert png.exists() and png.suffix == ".png"


def test_missing_checkpoint_names_producer(tmp_path, capsys):
    assert main(["-q", "--config", str(TINY), "--out", str(tmp_path), "tka-rate"]) == 1
    assert "gscsim pretrain-jscc" in capsys.readouterr().err


def test_missing_checkpoint_exception(tmp_path):
    pipe = Pipeline(cfgmod.load(TINY), tmp_path)
    with pytest.raises(MissingCheckpoint) as info:
        pipe.train_cloud()
    assert info.value.producer == "synth-data"


def test_seed_mismatch_refused(tmp_path):
    assert main(["-q", "--config", str(TINY), "--out", str(tmp_path), "synth-data"]) == 0
    assert main(["-q", "--config", str(TINY), "--out", str(tmp_path), "--seed", "7", "synth-data"]) == 1
    with pytest.raises(StageError):
        cfg = cfgmod.load(TINY)
        cfg.run.seed = 7
        Pipeline(cfg, tmp_path).synth_data()


def test_seed_changes_data(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["-q", "--config", str(TINY), "--out", str(a), "synth-data"])
    main(["-q", "--config", str(TINY), "--out", str(b), "--seed", "0x10", "synth-data"])
    da, _ = ck.load_arrays(a / "checkpoints" / "data.ckpt")
    db, _ = ck.load_arrays(b / "checkpoints" / "data.ckpt")
    assert not np.array_equal(da["cloud_images"], db["cloud_images"])


def test_cli_usage_and_config_errors(tmp_path, capsys):
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["--seed", "-1", "synth-data"]) == 2
    assert main(["gka", "--mode", "nope"]) == 2
    bad = tmp_path / "bad.ini"
    bad.write_text("[tka]\nrates = 3\n")
    assert main(["--config", str(bad), "synth-data"]) == 2
    assert main(["--config", str(tmp_path / "missing.ini"), "synth-data"]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["--help"]) == 0
