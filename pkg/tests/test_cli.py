import csv
import hashlib
import json
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pytest
import yaml

from hrlfair import __version__
from hrlfair.catalog import ItemCatalog
from hrlfair.cli import main

SMALL = {"env": {"n_items": 30, "dim": 4, "n_users": 20},
         "agents": {"hidden": 8, "L": 5},
         "trainer": {"epochs": 2, "episodes_per_epoch": 4, "batch_episodes": 2, "eval_episodes": 5}}


def schema(name):
    text = resources.files("hrlfair").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc, name):
    registry_schema = schema("eval_report")
    resolver_store = {"eval_report.schema.json": registry_schema}
    from referencing import Registry, Resource
    registry = Registry().with_resources(
        [(k, Resource.from_contents(v)) for k, v in resolver_store.items()])
    jsonschema.Draft202012Validator(schema(name), registry=registry).validate(doc)


def write_cfg(tmp_path, **sections):
    data = json.loads(json.dumps(SMALL))
    for sec, values in sections.items():
        if isinstance(values, dict):
            data.setdefault(sec, {}).update(values)
        else:
            data[sec] = values
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_gen_env_deterministic(tmp_path):
    for out in ("a", "b"):
        assert main(["gen-env", "--seed", "3", "--out", str(tmp_path / out)]) == 0
    for f in ("catalog.csv", "users.csv"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)
    rows = read_csv(tmp_path / "a" / "catalog.csv")
    assert len(rows) == 201
    cat = ItemCatalog.load_csv(tmp_path / "a" / "catalog.csv")
    assert cat.popular.sum() == 40
    # Zipf ranking: rank-ordered popularity is non-increasing
    pops = np.sort(cat.pop)[::-1]
    assert np.all(np.diff(pops) <= 0)
    assert cat.pop.max() == 1.0
    prov = json.loads((tmp_path / "a" / "provenance.json").read_text())
    validate(prov, "provenance")
    assert prov["version"] == __version__


def test_gen_env_from_log(tmp_path):
    main(["gen-env", "--out", str(tmp_path / "env")])
    log = tmp_path / "log.csv"
    log.write_text("user_id,item_id,timestamp,feedback\nu1,3,0,0.9\nu2,3,1,0.8\nu2,7,2,0.1\n")
    code = main(["gen-env", "--out", str(tmp_path / "fit"), "--log", str(log),
                 "--catalog", str(tmp_path / "env" / "catalog.csv")])
    assert code == 0
    cat = ItemCatalog.load_csv(tmp_path / "fit" / "catalog.csv")
    assert cat.pop[3] == 1.0
    assert main(["gen-env", "--out", str(tmp_path / "x"), "--log", str(log)]) == 2


def test_gen_env_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-env", "--out", str(blocker / "sub")]) == 1


def test_train_outputs(tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--variant", "wo-hie", "--seed", "2", "--out", str(out)]) == 0
    rows = read_csv(out / "seed_2" / "metrics.csv")
    assert rows[0][:2] == ["variant", "seed"] and len(rows) == 3
    assert all(r[0] == "wo-hie" and r[1] == "2" for r in rows[1:])
    doc = json.loads((out / "seed_2" / "metrics.json").read_text())
    validate(doc, "metrics")
    assert (out / "seed_2" / "checkpoint.bin").read_bytes()[:8] == b"HRL4PFG1"
    resolved = yaml.safe_load((out / "config.yaml").read_text())
    assert resolved["trainer"]["variant"] == "wo-hie" and resolved["seeds"] == [2]


def test_train_zero_epochs_header_only(tmp_path):
    cfg = write_cfg(tmp_path, trainer={"epochs": 0})
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_csv(out / "seed_0" / "metrics.csv")
    assert len(rows) == 1 and "r_cum_mean" in rows[0]


def test_train_smoke_under_a_minute(tmp_path):
    cfg = write_cfg(tmp_path, env={"n_items": 200, "dim": 8, "n_users": 500},
                    agents={"hidden": 32, "L": 20},
                    trainer={"epochs": 5, "episodes_per_epoch": 20, "batch_episodes": 4,
                             "eval_episodes": 20})
    start = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert time.perf_counter() - start < 60


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("trainer:\n  nonsense: 1\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "nonsense" in capsys.readouterr().err
    assert main(["train", "--config", str(write_cfg(tmp_path)), "--variant", "nope"]) == 2


def test_env_override(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    monkeypatch.setenv("HRL4PFG_TRAINER__EPOCHS", "1")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(read_csv(out / "seed_0" / "metrics.csv")) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = write_cfg(tmp)
    out = tmp / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_eval_reproducible_and_valid(trained, tmp_path):
    cfg, out = trained
    ck = out / "seed_0" / "checkpoint.bin"
    for name in ("e1", "e2"):
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ck), "--episodes", "4",
                     "--out", str(tmp_path / name)]) == 0
    assert digest(tmp_path / "e1" / "report.csv") == digest(tmp_path / "e2" / "report.csv")
    assert digest(tmp_path / "e1" / "report.json") == digest(tmp_path / "e2" / "report.json")
    validate(json.loads((tmp_path / "e1" / "report.json").read_text()), "eval_report")


def test_eval_single_episode_sd_zero(trained, tmp_path):
    cfg, out = trained
    main(["eval", "--config", str(cfg), "--checkpoint", str(out / "seed_0" / "checkpoint.bin"),
          "--episodes", "1", "--out", str(tmp_path / "e")])
    header, row = read_csv(tmp_path / "e" / "report.csv")
    rec = dict(zip(header, row))
    assert float(rec["r_cum_sd"]) == 0.0 and float(rec["len_sd"]) == 0.0


def test_eval_checkpoint_mismatch(trained, tmp_path, capsys):
    _, out = trained
    other = write_cfg(tmp_path, agents={"hidden": 6})
    code = main(["eval", "--config", str(other), "--checkpoint", str(out / "seed_0" / "checkpoint.bin"),
                 "--out", str(tmp_path / "e")])
    assert code == 4
    assert "actor.w0" in capsys.readouterr().err


def test_eval_random_variant_gini_positive(tmp_path):
    cfg = write_cfg(tmp_path, env={"n_items": 200, "dim": 8, "n_users": 100},
                    trainer={"epochs": 1, "eval_episodes": 5})
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--variant", "random", "--out", str(out)]) == 0
    assert main(["eval", "--config", str(cfg), "--variant", "random", "--episodes", "100",
                 "--checkpoint", str(out / "seed_0" / "checkpoint.bin"), "--out", str(tmp_path / "e")]) == 0
    doc = json.loads((tmp_path / "e" / "report.json").read_text())
    assert doc["gini"] > 0


def test_sweep_table(tmp_path):
    cfg = write_cfg(tmp_path, trainer={"epochs": 1}, seeds=[0, 1])
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg), "--axis", "lambda_g", "--values", "0.1",
                 "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert rows[0][:4] == ["axis", "axis_value", "seed", "variant"]
    assert len(rows) - 1 == 1 * 2
    assert {r[1] for r in rows[1:]} == {"0.1"}
    assert main(["sweep", "--config", str(cfg), "--axis", "W", "--values", "2,3,4,5,6",
                 "--out", str(tmp_path / "w")]) == 0
    rows = read_csv(tmp_path / "w" / "sweep.csv")
    assert len(rows) - 1 == 5 * 2
    assert [r[1] for r in rows[1:]] == ["2", "2", "3", "3", "4", "4", "5", "5", "6", "6"]


def test_sweep_empty_axis(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["sweep", "--config", str(cfg), "--axis", "M", "--values", ",",
                 "--out", str(tmp_path / "s")]) == 2


def test_sweep_parallel_matches_serial(tmp_path):
    cfg = write_cfg(tmp_path, trainer={"epochs": 1}, seeds=[0, 1])
    main(["sweep", "--config", str(cfg), "--axis", "M", "--values", "1,3", "--out", str(tmp_path / "a")])
    main(["sweep", "--config", str(cfg), "--axis", "M", "--values", "1,3", "--workers", "2",
          "--out", str(tmp_path / "b")])
    assert digest(tmp_path / "a" / "sweep.csv") == digest(tmp_path / "b" / "sweep.csv")
