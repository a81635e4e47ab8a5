"""Training/evaluation procedures: metrics, determinism, chaining, probes."""

import dataclasses
import json
from fractions import Fraction

import numpy as np
import pytest

from sscl import pipeline
from sscl.data import IGNORE_LABEL
from sscl.models import NetworkSpec, init_checkpoint
from sscl.oracles import confusion_ref
from sscl.pipeline import (ChainError, EvalReport, StageConfig,
                           average_accuracy, confusion_matrix,
                           default_stage_config, overall_accuracy,
                           weighted_median)
from sscl.synthgen import SceneConfig, benchmark_channel_meta, generate_dataset


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """A small dataset + caches shared by the training tests."""
    root = tmp_path_factory.mktemp("tiny")
    cfg = SceneConfig(H=32, W=32, channel_meta=benchmark_channel_meta(), seed=13)
    man = generate_dataset(cfg, 8, 4, root)
    cache = pipeline.SampleCache(man, ("train", "test"))
    spec = NetworkSpec(num_channels=man.C, num_classes=8, fe_width=8,
                       fe_blocks=1, proj_dims=(8, 8), backbone_widths=(8, 16))
    init = init_checkpoint(spec, seed=0, dataset_id=pipeline.dataset_id(man))
    return man, cache, spec, init


def _cfg(stage, **kw):
    kw.setdefault("crop_size", 16)
    kw.setdefault("batch_size", 4)
    kw.setdefault("epochs", 1)
    if stage == "core":
        kw.setdefault("cutout_range", (2, 5))
    return default_stage_config(stage, **kw)


class TestMetrics:
    def test_confusion_matches_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            k = int(rng.integers(2, 7))
            truth = rng.integers(0, k, 200).astype(np.uint8)
            truth[rng.random(200) < 0.1] = IGNORE_LABEL
            pred = rng.integers(0, k, 200).astype(np.uint8)
            np.testing.assert_array_equal(
                confusion_matrix(pred, truth, k), confusion_ref(pred, truth, k))

    def test_oa_aa_exact_rational(self):
        # hand-computed on constructed matrices, exact rational arithmetic
        rng = np.random.default_rng(1)
        for _ in range(25):
            k = int(rng.integers(2, 6))
            cm = rng.integers(0, 30, (k, k)).astype(np.int64)
            cm[rng.integers(0, k)] = 0  # one zero-support class
            if cm.sum() == 0 or (cm.sum(axis=1) > 0).sum() == 0:
                continue
            oa = Fraction(int(np.trace(cm)), int(cm.sum()))
            recalls = [Fraction(int(cm[i, i]), int(cm[i].sum()))
                       for i in range(k) if cm[i].sum() > 0]
            aa = sum(recalls) / len(recalls)
            assert overall_accuracy(cm) == float(oa)
            assert abs(average_accuracy(cm) - float(aa)) < 1e-15

    def test_zero_support_excluded_from_aa(self):
        cm = np.array([[5, 0, 0], [0, 0, 0], [2, 0, 2]])
        assert average_accuracy(cm) == (1.0 + 0.5) / 2

    def test_report_json_round_trip(self):
        rep = EvalReport(np.array([[3, 1], [0, 4]]), meta={"split": "test"})
        back = EvalReport.from_json(json.loads(json.dumps(rep.to_json())))
        assert np.array_equal(back.confusion, rep.confusion)
        assert back.overall_accuracy == rep.overall_accuracy

    def test_empty_report_rejected(self):
        with pytest.raises(ValueError):
            EvalReport(np.zeros((2, 2), np.int64)).overall_accuracy


class TestWeightedMedian:
    def test_forced_example(self):
        assert weighted_median(np.array([0.1, 0.5]), np.array([1, 3])) == 0.5

    def test_single_bin(self):
        assert weighted_median(np.array([-0.2]), np.array([7])) == -0.2

    def test_smallest_center_rule(self):
        # cumulative mass reaches exactly half at the second bin
        assert weighted_median(np.array([0.0, 1.0, 2.0]),
                               np.array([1, 1, 2])) == 1.0

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            weighted_median(np.array([0.0]), np.array([0]))


class TestStageConfig:
    def test_rejects_bad_p_drop(self):
        with pytest.raises(ValueError, match="p_drop"):
            StageConfig(stage="core", epochs=1, batch_size=1, crop_size=16,
                        p_drop=1.5)

    def test_rejects_unknown_stage(self):
        with pytest.raises(ValueError):
            StageConfig(stage="warmup", epochs=1, batch_size=1, crop_size=16)

    def test_scales_have_defaults(self):
        for scale in ("desk", "paper"):
            for stage in ("unifeat", "core", "finetune", "probe", "simsiam"):
                assert default_stage_config(stage, scale).stage == stage


class TestTrainingStages:
    def test_unifeat_trains_only_fe_and_proj(self, tiny):
        man, cache, spec, init = tiny
        ck = pipeline.run_unifeat(_cfg("unifeat", patches_per_sample=2),
                                  man, init, cache=cache)
        assert ck.stage == "unifeat"
        assert ck.discard_on_use == ("proj.",)
        assert ck.parent_hash == init.content_hash()
        changed = {k for k in ck.params
                   if not np.array_equal(ck.params[k], init.params[k])}
        assert changed and all(k.startswith(("fe.", "proj.")) for k in changed)

    def test_core_trains_trunk_not_seg_head(self, tiny):
        man, cache, spec, init = tiny
        ck = pipeline.run_core(_cfg("core"), man, init, cache=cache)
        assert ck.stage == "core"
        assert np.array_equal(ck.params["seg.head.w"], init.params["seg.head.w"])
        assert not np.array_equal(ck.params["recon.head.w"],
                                  init.params["recon.head.w"])

    def test_zero_epochs_is_identity(self, tiny):
        man, cache, spec, init = tiny
        ck = pipeline.run_core(_cfg("core", epochs=0), man, init, cache=cache)
        assert all(np.array_equal(ck.params[k], init.params[k]) for k in ck.params)

    def test_stage_reruns_bit_identical(self, tiny):
        man, cache, spec, init = tiny
        a = pipeline.run_core(_cfg("core"), man, init, cache=cache)
        b = pipeline.run_core(_cfg("core"), man, init, cache=cache)
        assert a.content_hash() == b.content_hash()

    def test_finetune_rejects_foreign_dataset(self, tiny, tmp_path):
        man, cache, spec, init = tiny
        other_cfg = SceneConfig(H=32, W=32, channel_meta=benchmark_channel_meta(),
                                seed=99)
        other = generate_dataset(other_cfg, 2, 1, tmp_path / "other")
        with pytest.raises(ChainError, match="dataset"):
            pipeline.run_finetune(_cfg("finetune"), other, init)

    def test_finetune_rejects_wrong_stage(self, tiny):
        man, cache, spec, init = tiny
        ft = pipeline.run_finetune(_cfg("finetune"), man, init, cache=cache)
        with pytest.raises(ChainError, match="stage"):
            pipeline.run_unifeat(_cfg("unifeat"), man, ft, cache=cache)

    def test_probe_freezes_everything_but_head(self, tiny):
        man, cache, spec, init = tiny
        probed, report = pipeline.run_linear_probe(
            _cfg("probe", epochs=2, crop_size=32), man, init, cache=cache)
        for k in probed.params:
            if k.startswith("probe.") or k.endswith(("running_mean", "running_var")):
                continue
            assert probed.params[k].tobytes() == init.params[k].tobytes(), k
        assert not np.array_equal(probed.params["probe.head.w"],
                                  init.params["probe.head.w"])
        assert 0.0 <= report.average_accuracy <= 1.0

    def test_simsiam_stage(self, tiny):
        man, cache, spec, init = tiny
        ck = pipeline.run_simsiam(_cfg("simsiam"), man, init, cache=cache)
        assert ck.stage == "simsiam"

    def test_metrics_jsonl_written(self, tiny, tmp_path):
        man, cache, spec, init = tiny
        pipeline.run_core(_cfg("core", epochs=2), man, init,
                          out_dir=tmp_path / "run", cache=cache)
        lines = (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert rec["stage"] == "core" and "loss" in rec and "lr" in rec


class TestEvaluate:
    def test_confusion_totals(self, tiny):
        man, cache, spec, init = tiny
        rep = pipeline.evaluate(init, man, "test", cache=cache)
        n_pix = cache.labels["test"].size
        n_ignored = int((cache.labels["test"] == IGNORE_LABEL).sum())
        assert rep.pixel_count == n_pix - n_ignored


class TestSimilarityHistogram:
    def test_identical_channels_median_one(self, tiny):
        man, cache, spec, init = tiny
        centers, mass, med = pipeline.similarity_histogram(
            init, man, (0, 0), n_samples=2, cache=cache)
        assert med == 1.0
        assert mass[:-1].sum() == 0  # all mass in the last bin

    def test_mass_counts_all_pixels(self, tiny):
        man, cache, spec, init = tiny
        centers, mass, med = pipeline.similarity_histogram(
            init, man, (0, 5), n_samples=3, cache=cache)
        assert mass.sum() == 3 * man.H * man.W
        assert centers[0] == -1.0 and centers[-1] == 1.0

    def test_checkpoint_not_mutated(self, tiny):
        man, cache, spec, init = tiny
        before = {k: v.copy() for k, v in init.params.items()}
        pipeline.similarity_histogram(init, man, (0, 1), n_samples=2, cache=cache)
        assert all(np.array_equal(init.params[k], before[k]) for k in before)


class TestExportFeatureMaps:
    def test_pngs_written(self, tiny, tmp_path):
        from PIL import Image

        man, cache, spec, init = tiny
        paths = pipeline.export_feature_maps(
            init, cache.images["train"][0], "fe:0", tmp_path, max_maps=3)
        assert len(paths) == 3
        img = Image.open(paths[0])
        assert img.size == (man.W, man.H) and img.mode == "L"

    def test_constant_map_is_midgray(self, tiny, tmp_path):
        from PIL import Image

        man, cache, spec, init = tiny
        zero_params = {k: np.zeros_like(v) for k, v in init.params.items()}
        ck = dataclasses.replace(init, params=zero_params)
        paths = pipeline.export_feature_maps(
            ck, cache.images["train"][0], "fe:0", tmp_path / "z", max_maps=1)
        arr = np.asarray(Image.open(paths[0]))
        assert (arr == 128).all()
