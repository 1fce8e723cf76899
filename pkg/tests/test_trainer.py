import numpy as np
import pytest

from symkp import dataio
from symkp.model import CheckpointError, checkpoint_bytes, predict
from symkp.trainer import (TrainConfig, TrainingDivergedError, load_checkpoint, lr_at,
                           save_checkpoint, train, write_log)


@pytest.fixture(scope="module")
def tiny_category():
    spec = dataio.SyntheticCategorySpec("table_like", instance_count=6,
                                        points_per_instance=300, seed=3)
    return dataio.generate_synthetic_category(spec)


def tiny_config(**overrides):
    base = dict(epochs=2, batch_size=4, n_points=300, n_nodes=8, k_basis=4,
                mode="instance", misalign_deg=45.0, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


class TestSchedule:
    def test_paper_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-3
        assert cfg.decay_factor == 0.5
        assert cfg.decay_every == 40
        assert cfg.epochs == 200
        assert cfg.batch_size == 32
        assert cfg.misalign_deg == 45.0
        assert (cfg.weights.w_chf, cfg.weights.w_cov, cfg.weights.w_inc) == (1, 1, 2)

    def test_decay_boundaries(self):
        cfg = TrainConfig()
        assert lr_at(0, cfg) == 1e-3
        assert lr_at(39, cfg) == 1e-3
        assert lr_at(40, cfg) == pytest.approx(5e-4)
        assert lr_at(80, cfg) == pytest.approx(2.5e-4)


class TestTrainLoop:
    def test_zero_lr_leaves_params_unchanged(self, tiny_category):
        manifest, clouds = tiny_category
        cfg = tiny_config(epochs=1, lr=0.0)
        from symkp.model import init_category_params
        fresh = init_category_params(cfg.n_nodes, cfg.k_basis, cfg.mode, seed=cfg.seed,
                                     k_neighbors=cfg.k_neighbors)
        params, _ = train(manifest, cfg, clouds=clouds)
        assert np.array_equal(params.half_basis, fresh.half_basis)
        assert np.array_equal(params.sym_normal, fresh.sym_normal)
        assert params.category_angle == fresh.category_angle
        for k in fresh.net:
            assert np.array_equal(params.net[k], fresh.net[k])

    def test_log_schema_and_finiteness(self, tiny_category):
        manifest, clouds = tiny_category
        params, log = train(manifest, tiny_config(), clouds=clouds)
        assert len(log) == 2 * 2  # 5 train instances / batch 4 -> 2 steps per epoch
        for row in log:
            assert set(row) == {"epoch", "step", "lr", "L_chf", "L_cov", "L_inc", "total"}
            assert np.isfinite(row["total"])
            assert row["total"] == pytest.approx(
                row["L_chf"] + row["L_cov"] + 2.0 * row["L_inc"], rel=1e-9)

    def test_sym_normal_stays_unit(self, tiny_category):
        manifest, clouds = tiny_category
        params, _ = train(manifest, tiny_config(epochs=3), clouds=clouds)
        assert abs(np.linalg.norm(params.sym_normal) - 1.0) < 1e-9

    def test_bitwise_determinism(self, tiny_category):
        manifest, clouds = tiny_category
        p1, log1 = train(manifest, tiny_config(epochs=2), clouds=clouds)
        p2, log2 = train(manifest, tiny_config(epochs=2), clouds=clouds)
        assert checkpoint_bytes(p1) == checkpoint_bytes(p2)
        assert log1 == log2

    def test_no_train_instances(self):
        manifest = dataio.DatasetManifest(category="x", instances=[
            dataio.ManifestEntry("a.xyz", "test")])
        with pytest.raises(ValueError, match="no 'train' instances"):
            train(manifest, tiny_config())

    def test_nonfinite_loss_names_instance(self, tiny_category):
        manifest, clouds = tiny_category
        nan_clouds = {k: dataio.PointCloud(v.points.copy(), labels=v.labels, id=v.id)
                      for k, v in clouds.items()}
        victim = manifest.split("train")[1].id
        bad = nan_clouds[victim].points
        bad[0] = [np.nan, 0.0, 0.0]
        with pytest.raises((TrainingDivergedError, dataio.PointCloudError, ValueError)):
            train(manifest, tiny_config(epochs=1), clouds=nan_clouds)

    def test_outputs_written(self, tiny_category, tmp_path):
        manifest, clouds = tiny_category
        train(manifest, tiny_config(epochs=2, checkpoint_every=1), clouds=clouds,
              out_dir=tmp_path)
        assert (tmp_path / "checkpoint.cskp").exists()
        assert (tmp_path / "train_log.csv").exists()
        assert (tmp_path / "checkpoint_epoch0001.cskp").exists()
        header = (tmp_path / "train_log.csv").read_text().splitlines()[0]
        assert header == "epoch,step,lr,L_chf,L_cov,L_inc,total"


class TestCheckpointIO:
    def test_save_load_round_trip(self, tiny_category, tmp_path):
        manifest, clouds = tiny_category
        params, _ = train(manifest, tiny_config(epochs=1), clouds=clouds)
        path = tmp_path / "ckpt.cskp"
        save_checkpoint(params, path)
        back = load_checkpoint(path)
        assert checkpoint_bytes(back) == checkpoint_bytes(params)

    def test_truncated_file_rejected(self, tiny_category, tmp_path):
        manifest, clouds = tiny_category
        params, _ = train(manifest, tiny_config(epochs=1), clouds=clouds)
        path = tmp_path / "ckpt.cskp"
        save_checkpoint(params, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="cannot read"):
            load_checkpoint(tmp_path / "absent.cskp")

    def test_prediction_regression_after_reload(self, tiny_category, tmp_path):
        manifest, clouds = tiny_category
        params, _ = train(manifest, tiny_config(epochs=1), clouds=clouds)
        path = tmp_path / "ckpt.cskp"
        save_checkpoint(params, path)
        back = load_checkpoint(path)
        pc = dataio.resample(dataio.normalize(clouds[manifest.instances[0].id]), 300, seed=9)
        a = predict(params, pc.points, seed=2)
        b = predict(back, pc.points, seed=2)
        assert np.array_equal(a.keypoints, b.keypoints)

    def test_log_rows_written_deterministically(self, tiny_category, tmp_path):
        manifest, clouds = tiny_category
        _, log = train(manifest, tiny_config(epochs=1), clouds=clouds)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_log(log, p1)
        write_log(log, p2)
        assert p1.read_bytes() == p2.read_bytes()
