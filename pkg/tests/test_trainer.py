import csv
import json

import numpy as np
import pytest
import torch

from gemseg.datamodel import ImageSample, LRSchedule, RunConfig, SelectionSource
from gemseg.model import CheckpointError, build_model, load_checkpoint, load_state, save_checkpoint
from gemseg.synth import procedural_dataset
from gemseg.trainer import (
    HISTORY_FIELDS, NonFiniteLossError, ablation_records, ablation_sweep, batch_order, evaluate_checkpoint,
    evaluate_model, format_ablation, lr_factor, parse_axes, train,
)

from conftest import GOLDEN


@pytest.fixture(scope="module")
def data32():
    return procedural_dataset(4, 32, seed=3)


def states_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


class TestSchedule:
    def test_batch_order_pure(self):
        a = batch_order(10, 3, seed=4, epoch=2)
        b = batch_order(10, 3, seed=4, epoch=2)
        assert [x.tolist() for x in a] == [x.tolist() for x in b]
        assert sorted(np.concatenate(a).tolist()) == list(range(10)) and [len(x) for x in a] == [3, 3, 3, 1]
        assert [x.tolist() for x in batch_order(10, 3, 4, 3)] != [x.tolist() for x in a]

    def test_lr_factor(self):
        const = RunConfig(image_size=32, num_queries=4)
        assert [lr_factor(const, i, 10) for i in (0, 5, 9)] == [1.0, 1.0, 1.0]
        cos = const.replace(lr_schedule=LRSchedule.COSINE, warmup_iters=4)
        assert [lr_factor(cos, i, 104) for i in range(4)] == [0.25, 0.5, 0.75, 1.0]
        assert lr_factor(cos, 54, 104) == pytest.approx(0.5)
        assert lr_factor(cos, 103, 104) == pytest.approx(0.5 * (1 + np.cos(np.pi * 99 / 100)))


class TestTrain:
    def test_zero_epochs(self, tiny_config, data32, tmp_path):
        cfg = tiny_config.replace(epochs_pretrain=0)
        result = train(cfg, data32, out_dir=tmp_path)
        assert result.history == []
        model, payload = load_checkpoint(tmp_path / "checkpoint.pt")
        assert states_equal(model.state_dict(), build_model(cfg).state_dict())
        assert (tmp_path / "history.csv").read_text().strip() == ",".join(HISTORY_FIELDS)

    def test_deterministic_history(self, tiny_config, data32):
        cfg = tiny_config.replace(epochs_pretrain=2, learning_rate=1e-3)
        a, b = train(cfg, data32), train(cfg, data32)
        assert len(a.history) == 4 and a.history == b.history
        assert states_equal(a.model.state_dict(), b.model.state_dict())

    def test_history_file(self, tiny_config, data32, tmp_path):
        cfg = tiny_config.replace(epochs_pretrain=1, learning_rate=5e-4)
        result = train(cfg, data32, out_dir=tmp_path)
        rows = list(csv.DictReader((tmp_path / "history.csv").open()))
        assert tuple(rows[0]) == HISTORY_FIELDS and len(rows) == 2
        assert float(rows[1]["total"]) == result.history[1]["total"]
        assert float(rows[0]["lr"]) == 5e-4

    def test_non_finite(self, tiny_config, data32):
        bad = ImageSample("broken", np.full((32, 32, 3), np.nan, np.float32), (32, 32))
        data = [(bad, data32[0][1]), data32[1]]
        with pytest.raises(NonFiniteLossError, match="batch 0"):
            train(tiny_config.replace(batch_size=1, seed=1), data)

    def test_empty(self, tiny_config):
        with pytest.raises(ValueError):
            train(tiny_config, [])

    def test_max_iters_and_finetune_epochs(self, tiny_config, data32, tmp_path):
        cfg = tiny_config.replace(epochs_pretrain=5, epochs_finetune=1, max_iters=3)
        assert len(train(cfg, data32).history) == 3
        save_checkpoint(build_model(cfg), tmp_path / "init.pt")
        assert len(train(cfg.replace(max_iters=0), data32, init_checkpoint=tmp_path / "init.pt").history) == 2

    def test_best_validation_weights(self, tiny_config, data32):
        cfg = tiny_config.replace(epochs_pretrain=3, learning_rate=1e-3)
        result = train(cfg, data32, val_set=data32[:2])
        assert len(result.evaluations) == 3
        best_epoch, best = max(result.evaluations, key=lambda e: e[1].aggregate["iou"])
        assert result.best_iou == best.aggregate["iou"]
        assert evaluate_model(result.model, data32[:2]).aggregate["iou"] == result.best_iou


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tiny_config, data32, tmp_path):
        model = train(tiny_config.replace(epochs_pretrain=1), data32).model
        before = evaluate_model(model, data32)
        save_checkpoint(model, tmp_path / "m.pt")
        after = evaluate_checkpoint(tmp_path / "m.pt", data32)
        assert before.to_dict() == after.to_dict()

    def test_rejects_mismatch(self, tiny_config, tmp_path):
        save_checkpoint(build_model(tiny_config), tmp_path / "m.pt")
        wider = build_model(tiny_config.replace(d_model=32))
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_state(wider, tmp_path / "m.pt")
        alt = build_model(tiny_config.replace(selection_source=SelectionSource.C4))
        with pytest.raises(CheckpointError, match="missing"):
            load_state(alt, tmp_path / "m.pt")

    def test_rejects_foreign_files(self, tmp_path):
        torch.save({"weights": 1}, tmp_path / "x.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.pt")
        (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "junk.pt")


class TestEvaluateCheckpoint:
    def test_untrained_in_range(self, tiny_config, data32):
        rep = evaluate_checkpoint(build_model(tiny_config), data32)
        a = rep.aggregate
        assert 0 <= a["iou"] <= 1 and 0 <= a["f_beta"] <= 1 and 0 <= a["mae"] <= 1 and 0 <= a["ber"] <= 100

    def test_empty(self, tiny_config):
        with pytest.raises(ValueError):
            evaluate_checkpoint(build_model(tiny_config), [])

    def test_golden(self, tiny_config, data32):
        golden = json.loads((GOLDEN / "eval_report.json").read_text())
        rep = evaluate_checkpoint(build_model(tiny_config, seed=11), data32).to_dict()
        assert rep["per_image"].keys() == golden["per_image"].keys()
        for key, row in golden["per_image"].items():
            for name, value in row.items():
                assert rep["per_image"][key][name] == pytest.approx(value, abs=1e-9), (key, name)


class TestAblation:
    def test_parse_axes(self):
        axes = parse_axes("selection_source=dqs,c3; dqs_init=true,false")
        assert axes == {"selection_source": [SelectionSource.DQS, SelectionSource.C3], "dqs_init": [True, False]}
        for bad in ("bogus=1", "selection_source", "selection_source=c9"):
            with pytest.raises(ValueError):
                parse_axes(bad)

    def test_single_cell(self, tiny_config, data32):
        rows = ablation_sweep(tiny_config.replace(max_iters=1), data32)
        assert len(rows) == 1

    def test_sources_and_aux_toggle(self, tiny_config, data32):
        cfg = tiny_config.replace(max_iters=1)
        rows = ablation_sweep(cfg, data32[:2], axes={"selection_source": list(SelectionSource),
                                                     "dqs_aux_loss": [True, False]})
        assert len(rows) == 8
        assert len({(r.selection_source, r.dqs_aux_loss) for r in rows}) == 8
        off = [r for r in rows if not r.dqs_aux_loss]
        assert all(r.final_loss["q"] == 0 for r in off)
        table = format_ablation(rows)
        lines = table.splitlines()
        assert lines[0].split()[:4] == ["Source", "Extra", "loss", "Init"]
        assert len(lines) == 2 + 8
        assert all(line.rstrip().endswith("-") for line in lines[2:] if " no " in line.split("  ", 1)[1][:12])
        records = ablation_records(rows)
        assert {r["selection_source"] for r in records} == {"dqs", "c3", "c4", "c3c4c5"}
