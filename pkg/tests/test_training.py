import json

import numpy as np
import pytest
import torch

from twostage_anomaly.config import apply_overrides
from twostage_anomaly.data import DatasetHandle, load_folder_dataset, synth_defect_dataset
from twostage_anomaly.errors import (BatchTooSmallError, EmptyInputError,
                                     FingerprintMismatchError, ModelNotReadyError,
                                     StaleImpressionsError, TrainingDivergedError)
from twostage_anomaly.perceptual import build_backbone
from twostage_anomaly.training import (ABLATION_ROWS, SINGLE_DISABLED_ROWS, ImpressionDataset,
                                       _epoch_batches, _seeded_model, compute_impressions,
                                       detect, evaluate, generate_impression_set, images_of,
                                       load_expert_checkpoint, load_ie_checkpoint, output_lock,
                                       reconstruct_all, run_ablation, score_batch,
                                       train_expert_net, train_ie_net)
from twostage_anomaly.ienet import IENet, discriminator_cross_entropy, random_derangement


@pytest.fixture
def synth():
    return synth_defect_dataset(8, 4, 16, seed=3, n_test_clean=2)


@pytest.fixture
def trained(tiny_config, synth, tmp_path):
    train = synth.select("train")
    ie = train_ie_net(tiny_config, train, tmp_path)
    imps = generate_impression_set(ie.checkpoint, train, tmp_path)
    expert = train_expert_net(tiny_config, imps, tmp_path, ie_checkpoint=ie.checkpoint)
    return ie, expert, tmp_path


class TestIETraining:
    def test_history_and_checkpoints(self, trained):
        ie, _, out = trained
        assert len(ie.history) == 4  # 8 images, batch 4, 2 epochs
        assert set(ie.history[0]) == {"step", "total", "l_t", "kl", "l_d"}
        for name in ("ie.pt", "ie_last.pt", "ie_best.pt"):
            assert (out / "checkpoints" / name).is_file()
        assert "train-ie" in (out / "log.txt").read_text()
        assert json.loads((out / "ie_history.json").read_text()) == ie.history

    def test_deterministic(self, tiny_config, synth):
        a = train_ie_net(tiny_config, synth.select("train"))
        b = train_ie_net(tiny_config, synth.select("train"))
        assert a.history == b.history

    def test_batch_of_one(self, tiny_config, synth):
        cfg = apply_overrides(tiny_config, ["train.batch_size=1"])
        with pytest.raises(BatchTooSmallError):
            train_ie_net(cfg, synth.select("train"))

    def test_without_mi(self, tiny_config, synth):
        cfg = apply_overrides(tiny_config, ["ablation.use_mi_loss=false"])
        res = train_ie_net(cfg, synth.select("train"))
        assert all(h["l_t"] == 0.0 and h["kl"] == 0.0 for h in res.history)
        cfg1 = apply_overrides(cfg, ["train.batch_size=1", "train.ie_max_steps=2"])
        assert len(train_ie_net(cfg1, synth.select("train")).history) == 2

    def test_generator_step_leaves_discriminator_alone(self, tiny_config, synth):
        """After one step the discriminator equals a manual discriminator-only update."""
        cfg = apply_overrides(tiny_config, ["train.ie_max_steps=1", "ie.zero_init_disc=false"])
        train = synth.select("train")
        res = train_ie_net(cfg, train)

        x = images_of(train)
        model = _seeded_model(IENet, cfg)
        model.train()
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        opt = torch.optim.Adam(model.disc.parameters(), lr=cfg.train.ie_lr)
        idx = _epoch_batches(len(x), 4, 2, gen)[0]
        perm = random_derangement(4, gen)
        noise = torch.randn((4, cfg.ie.d_z), generator=gen)
        with torch.no_grad():
            z, pooled = model.encoder(x[idx])
            z_tilde = model.estimate_moments(z).sample(noise)
        loss = discriminator_cross_entropy(model.disc(pooled, z), model.disc(pooled[perm], z_tilde))
        opt.zero_grad()
        loss.backward()
        opt.step()
        for (name, a), b in zip(model.disc.state_dict().items(),
                                res.model.disc.state_dict().values()):
            torch.testing.assert_close(a, b, msg=name)
        assert not torch.equal(model.encoder.to_latent.weight, res.model.encoder.to_latent.weight)

    def test_divergence_keeps_last_good(self, tiny_config, synth, tmp_path):
        cfg = apply_overrides(tiny_config, ["train.ie_lr=1e30", "train.ie_epochs=6"])
        with pytest.raises(TrainingDivergedError) as info:
            train_ie_net(cfg, synth.select("train"), tmp_path)
        assert info.value.exit_code == 5
        if info.value.last_checkpoint is not None:
            load_ie_checkpoint(info.value.last_checkpoint)

    def test_empty(self, tiny_config):
        with pytest.raises(EmptyInputError):
            train_ie_net(tiny_config, DatasetHandle("", "train", [], 16))


class TestCheckpoints:
    def test_round_trip(self, trained, tiny_config, synth):
        ie, expert, out = trained
        x = images_of(synth.select("train"))[:2]
        loaded = load_ie_checkpoint(out / "checkpoints" / "ie.pt", tiny_config)
        with torch.no_grad():
            torch.testing.assert_close(loaded.impression(x), ie.model.impression(x))
        load_expert_checkpoint(out / "checkpoints" / "expert.pt", tiny_config)

    def test_missing(self, tmp_path):
        with pytest.raises(ModelNotReadyError):
            load_ie_checkpoint(tmp_path / "nope.pt")

    def test_wrong_kind(self, trained):
        _, _, out = trained
        with pytest.raises(ModelNotReadyError):
            load_expert_checkpoint(out / "checkpoints" / "ie.pt")

    def test_size_mismatch(self, trained, tiny_config):
        _, _, out = trained
        cfg = apply_overrides(tiny_config, ["image_size=32"])
        with pytest.raises(FingerprintMismatchError):
            load_ie_checkpoint(out / "checkpoints" / "ie.pt", cfg)
        cfg = apply_overrides(tiny_config, ["ie.d_z=12"])
        with pytest.raises(FingerprintMismatchError):
            load_ie_checkpoint(out / "checkpoints" / "ie.pt", cfg)


class TestImpressions:
    def test_cardinality_and_idempotence(self, trained, synth):
        ie, _, out = trained
        manifest = out / "impressions" / "manifest.json"
        imps = ImpressionDataset.open(out)
        assert len(imps.pairs) == 8
        before = {p: (out / p).read_bytes() for pair in imps.pairs for p in pair}
        before[manifest] = manifest.read_bytes()
        generate_impression_set(ie.checkpoint, synth.select("train"), out)
        after = {p: (out / p).read_bytes() for pair in imps.pairs for p in pair}
        after[manifest] = manifest.read_bytes()
        assert before == after

    def test_stale_after_retraining(self, trained, tiny_config, synth):
        ie, _, out = trained
        ckpt_bytes = ie.checkpoint.read_bytes()
        cfg = apply_overrides(tiny_config, ["seed=5"])
        retrained = train_ie_net(cfg, synth.select("train"), out / "again")
        with pytest.raises(StaleImpressionsError):
            generate_impression_set(retrained.checkpoint, synth.select("train"), out)
        generate_impression_set(retrained.checkpoint, synth.select("train"), out, force=True)
        assert ie.checkpoint.read_bytes() == ckpt_bytes
        with pytest.raises(StaleImpressionsError):
            train_expert_net(tiny_config, ImpressionDataset.open(out), ie_checkpoint=ie.checkpoint)

    def test_matches_model(self, trained, synth):
        ie, _, out = trained
        _, m = ImpressionDataset.open(out).load()
        expected = compute_impressions(ie.model, synth.select("train"))
        torch.testing.assert_close(m, expected)


class TestExpertTraining:
    def test_components_logged(self, trained):
        _, expert, out = trained
        assert set(expert.history[0]) == {"step", "total", "l_x", "l_m", "l_s"}
        assert (out / "checkpoints" / "expert.pt").is_file()

    def test_unguided(self, tiny_config, trained):
        _, _, out = trained
        cfg = apply_overrides(tiny_config, ["ablation.use_detail_guidance=false"])
        a = train_expert_net(cfg, ImpressionDataset.open(out))
        b = train_expert_net(cfg, ImpressionDataset.open(out))
        assert all(h["l_s"] == 0.0 for h in a.history)
        assert a.history == b.history


class TestEvaluate:
    def test_report_and_artifacts(self, trained, tiny_config, synth):
        ie, expert, out = trained
        test = synth.select("test")
        ckpt_before = (out / "checkpoints" / "ie.pt").read_bytes()
        report = evaluate(out / "checkpoints" / "ie.pt", out / "checkpoints" / "expert.pt",
                          test, tiny_config, out / "eval")
        rec = report.categories[0]
        assert rec.category == "synthetic" and rec.n_items == 6
        for v in (rec.iou, rec.pixel_auroc, rec.image_auroc):
            assert 0.0 <= v <= 1.0
        assert report.config_fingerprint == tiny_config.fingerprint()
        assert len(list((out / "eval" / "maps").glob("*.png"))) == 6
        assert len(list((out / "eval" / "maps").glob("*.npy"))) == 6
        assert len(list((out / "eval" / "masks").glob("*.png"))) == 6
        assert json.loads((out / "eval" / "report.json").read_text())["mean_iou"] == rec.iou
        assert (out / "checkpoints" / "ie.pt").read_bytes() == ckpt_before

    def test_deterministic_report(self, trained, tiny_config, synth):
        ie, expert, out = trained
        evaluate(ie.model, expert.model, synth.select("test"), tiny_config, out / "a")
        evaluate(ie.model, expert.model, synth.select("test"), tiny_config, out / "b")
        assert (out / "a" / "report.json").read_bytes() == (out / "b" / "report.json").read_bytes()

    def test_without_expert_uses_x_vs_m(self, trained, tiny_config, synth):
        ie, _, _ = trained
        cfg = apply_overrides(tiny_config, ["ablation.use_expert_net=false"])
        x = images_of(synth.select("test"))[:2]
        recon = reconstruct_all(ie.model, None, x, cfg)
        backbone = build_backbone(cfg.pm)
        e = score_batch(recon, cfg, backbone)
        from twostage_anomaly.perceptual import anomaly_map
        expected = anomaly_map(x, None, recon["m"], None, backbone, cfg.pm.layer_weights,
                               use_expert=False)
        torch.testing.assert_close(e, expected)
        assert evaluate(ie.model, None, synth.select("test"), cfg).mean_iou is not None

    def test_empty(self, trained, tiny_config):
        ie, expert, _ = trained
        with pytest.raises(EmptyInputError):
            evaluate(ie.model, expert.model, DatasetHandle("", "test", [], 16), tiny_config)

    def test_missing_expert(self, trained, tiny_config, synth, tmp_path):
        ie, _, _ = trained
        with pytest.raises(ModelNotReadyError):
            evaluate(ie.model, tmp_path / "missing.pt", synth.select("test"), tiny_config)

    def test_folder_dataset(self, trained, tiny_config, folder_dataset):
        ie, expert, _ = trained
        test = load_folder_dataset(folder_dataset, "test", image_size=16)
        report = evaluate(ie.model, expert.model, test, tiny_config)
        assert report.categories[0].category == "widget"
        assert report.categories[0].n_items == 5


def test_detect_writes_five_images_and_raw(trained, tiny_config, folder_dataset, tmp_path):
    ie, expert, _ = trained
    res = detect(ie.model, expert.model, folder_dataset / "test" / "crack" / "000.png",
                 tiny_config, tmp_path / "det")
    files = sorted(p.name for p in (tmp_path / "det").iterdir())
    assert len([f for f in files if f.endswith(".png")]) == 5
    assert [f for f in files if f.endswith(".npy")] == ["anomaly_raw.npy"]
    assert np.load(tmp_path / "det" / "anomaly_raw.npy").shape == (16, 16)
    assert res["score"] >= 0


def test_output_lock(tmp_path):
    with output_lock(tmp_path / "run"):
        assert (tmp_path / "run" / ".lock").is_file()
    assert not (tmp_path / "run" / ".lock").exists()


def test_ablation_rows_cover_published_block():
    names = [n for n, _ in ABLATION_ROWS]
    assert names[0] == "baseline" and names[-1] == "full" and len(names) == 7
    flags = {n: (t.use_mi_loss, t.use_expert_net, t.use_detail_guidance,
                 t.use_naive_impression_term) for n, t in ABLATION_ROWS}
    assert flags["baseline"] == (False, False, False, False)
    assert flags["full"] == (True, True, True, True)
    assert len(set(flags.values())) == 7
    assert len(SINGLE_DISABLED_ROWS) == 5


def test_run_ablation_trains_each_stage_once(tiny_config, synth, tmp_path, monkeypatch):
    import twostage_anomaly.training as training
    calls = {"ie": 0, "expert": 0}
    real_ie, real_ex = training.train_ie_net, training.train_expert_net

    def count_ie(*a, **k):
        calls["ie"] += 1
        return real_ie(*a, **k)

    def count_ex(*a, **k):
        calls["expert"] += 1
        return real_ex(*a, **k)

    monkeypatch.setattr(training, "train_ie_net", count_ie)
    monkeypatch.setattr(training, "train_expert_net", count_ex)
    outcome = run_ablation(tiny_config, synth.select("train"), synth.select("test"),
                           out_dir=tmp_path / "abl")
    assert list(outcome.reports) == [n for n, _ in ABLATION_ROWS]
    assert calls == {"ie": 2, "expert": 4}
    assert (tmp_path / "abl" / "ablation.json").is_file()
    assert "full" in outcome.to_table()


def test_run_ablation_reuses_given_stages(tiny_config, synth, monkeypatch):
    import twostage_anomaly.training as training
    train, test = synth.select("train"), synth.select("test")
    fresh = run_ablation(tiny_config, train, test, SINGLE_DISABLED_ROWS[:2])
    ie = train_ie_net(tiny_config, train).model
    x = training.images_of(train)
    expert = train_expert_net(tiny_config, (x, training.compute_impressions(ie, x))).model
    calls = []
    real_ie = training.train_ie_net
    monkeypatch.setattr(training, "train_ie_net", lambda *a, **k: calls.append(1) or real_ie(*a, **k))
    reused = run_ablation(tiny_config, train, test, SINGLE_DISABLED_ROWS[:2],
                          ie_models={True: ie}, expert_models={(True, True): expert})
    assert len(calls) == 1  # only the no-MI stage is trained
    assert reused.to_json() == fresh.to_json()


class TestJointFineTuning:
    def test_frozen_by_default(self, trained):
        ie, expert, _ = trained
        assert expert.ie_model is None
        assert "l_d" not in expert.history[0]

    def test_joint_updates_a_copy_of_stage_one(self, tiny_config, synth, tmp_path):
        cfg = apply_overrides(tiny_config, ["train.freeze_ie=false"])
        train = synth.select("train")
        ie = train_ie_net(cfg, train).model
        before = [p.detach().clone() for p in ie.parameters()]
        x = images_of(train)
        res = train_expert_net(cfg, (x, compute_impressions(ie, x)), tmp_path, ie_model=ie)
        assert "l_d" in res.history[0]
        assert all(torch.equal(a, b) for a, b in zip(before, ie.parameters()))
        assert any(not torch.equal(a, b) for a, b in zip(before, res.ie_model.parameters()))
        assert (tmp_path / "checkpoints" / "ie_joint.pt").is_file()
        evaluate(res.ie_model, res.model, synth.select("test"), cfg)

    def test_joint_needs_stage_one(self, tiny_config, synth):
        cfg = apply_overrides(tiny_config, ["train.freeze_ie=false"])
        x = images_of(synth.select("train"))
        with pytest.raises(ModelNotReadyError):
            train_expert_net(cfg, (x, x))
