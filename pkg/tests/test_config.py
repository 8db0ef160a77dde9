import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normforge.config import (ConfigError, ExperimentConfig, dump_config, from_flat, load_config,
                              parse_lines, preset, split_grid, to_flat)


def roundtrip(cfg):
    return from_flat(parse_lines(dump_config(cfg).splitlines()))


def test_default_roundtrip_lossless():
    cfg = ExperimentConfig()
    assert roundtrip(cfg) == cfg


@pytest.mark.parametrize("name", ["paper-envi", "toy-copy"])
def test_preset_roundtrip(name):
    cfg = preset(name)
    assert roundtrip(cfg) == cfg


def test_envi_preset_values():
    flat = to_flat(preset("paper-envi"))
    assert flat["model.d_model"] == 512 and flat["model.d_ff"] == 2048
    assert flat["model.n_enc_layers"] == flat["model.n_dec_layers"] == 6
    assert flat["model.n_heads"] == 8 and flat["model.residual"] == "PreNorm"
    assert flat["model.norm.variant"] == "ScaleNorm" and flat["model.fix_norm"] is True
    assert flat["schedule.n_warmup"] == 8000 and flat["iters_per_epoch"] == 1500
    assert flat["max_epochs"] == 200
    with pytest.raises(ConfigError):
        preset("nope")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8).map(lambda h: 8 * h), st.sampled_from(["PreNorm", "PostNorm"]),
       st.sampled_from(["LayerNorm", "ScaleNorm", "RMSNorm"]), st.booleans(),
       st.floats(1e-6, 1e-2, allow_nan=False), st.integers(0, 2 ** 31), st.integers(0, 50))
def test_roundtrip_property(d, residual, variant, fix, lr, seed, epochs):
    cfg = from_flat({"model.d_model": str(d), "model.n_heads": "4" if d % 4 == 0 else "1",
                     "model.residual": residual, "model.norm.variant": variant,
                     "model.fix_norm": str(fix), "schedule.kind": "NoWarmup",
                     "schedule.base_lr": repr(lr), "seed": str(seed), "max_epochs": str(epochs)})
    back = roundtrip(cfg)
    assert back == cfg
    assert back.schedule.base_lr == lr  # floats survive text exactly


def test_unknown_keys_rejected():
    for bad in ({"modle.d_model": "8"}, {"model.depth": "3"}, {"model": "x"},
                {"seed.x": "1"}, {"model.norm.variant.x": "y"}):
        with pytest.raises(ConfigError, match="unknown"):
            from_flat(bad)


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        from_flat({"model.d_model": "abc"})
    with pytest.raises(ConfigError):
        from_flat({"model.fix_norm": "maybe"})
    with pytest.raises(ConfigError):
        from_flat({"model.residual": "MidNorm"})
    with pytest.raises(ConfigError):
        from_flat({"early_stop_patience": "0"})


def test_parse_lines_comments_and_errors():
    vals = parse_lines(["# header", "", "a.b = 3  # trailing", "c=x=y"])
    assert vals == {"a.b": "3", "c": "x=y"}
    with pytest.raises(ConfigError, match=":2:"):
        parse_lines(["a=1", "junk"], "f.cfg")


def test_overrides_win(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("model.d_model=32\nseed=4\n")
    cfg = load_config(p, ["seed=9", "schedule.patience=5"])
    assert cfg.model.d_model == 32 and cfg.seed == 9 and cfg.schedule.patience == 5


def test_base_config_merge():
    cfg = from_flat({"seed": "3"}, base=preset("toy-copy"))
    assert cfg.seed == 3 and cfg.model.d_model == 64 and cfg.name == "toy-copy"


def test_scientific_int():
    assert from_flat({"data.n_train": "1e4"}).data.n_train == 10000


def test_split_grid():
    base, variants, seeds = split_grid({"seed": "1", "grid.seeds": "0, 1 2",
                                        "grid.a.model.residual": "PreNorm",
                                        "grid.b.model.residual": "PostNorm",
                                        "grid.b.seed": "5"})
    assert base == {"seed": "1"} and seeds == [0, 1, 2]
    assert variants == {"a": {"model.residual": "PreNorm"},
                        "b": {"model.residual": "PostNorm", "seed": "5"}}
    with pytest.raises(ConfigError):
        split_grid({"grid.x": "1"})
    with pytest.raises(ConfigError):
        split_grid({"grid.seeds": "a b"})


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).resolve().parent.parent / "configs"
    for path in sorted(root.glob("*.cfg")):
        base, variants, _ = split_grid(parse_lines(path.read_text().splitlines(), str(path)))
        cfg = from_flat(base)
        for v in variants.values():
            from_flat(v, base=cfg)
