import json

import numpy as np
import pytest

from rosettavae import distill, harness, vae
from rosettavae.datasets import gen_8gaussians, load_tabular, partition_halfplane


def tiny_config(out_dir, **overrides):
    base = dict(
        n_per_component=8,
        epochs=2,
        n_repeats=2,
        k=2,
        batch_size=16,
        out_dir=str(out_dir),
        seed=0,
    )
    base.update(overrides)
    return harness.ExperimentConfig(**base)


def read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestConfig:
    def test_roundtrip_through_dict(self):
        cfg = harness.ExperimentConfig(hidden=(8, 4), rho=1.5)
        again = harness.ExperimentConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError):
            harness.ExperimentConfig.from_dict({"bogus": 1})

    def test_digest_tracks_content(self):
        a = harness.config_digest(harness.ExperimentConfig(rho=1.0))
        b = harness.config_digest(harness.ExperimentConfig(rho=2.0))
        assert a != b
        assert a == harness.config_digest(harness.ExperimentConfig(rho=1.0))

    def test_n_repeats_floor(self):
        with pytest.raises(ValueError):
            harness.ExperimentConfig(n_repeats=1)


class TestGridValues:
    def test_bracket_cardinalities(self):
        assert len(harness.grid_values(0.0, 2.5, 25.0)) == 11
        assert len(harness.grid_values(0.0, 0.75, 15.0)) == 21

    def test_endpoints_included(self):
        vals = harness.grid_values(0.0, 2.5, 25.0)
        assert vals[0] == 0.0
        assert vals[-1] == 25.0

    def test_single_cell(self):
        assert harness.grid_values(3.0, 0.0, 3.0) == (3.0,)

    def test_selection_prefers_smaller_on_ties(self):
        values = [0.0, 1.0, 2.0]
        assert harness._select_best(values, [5.0, 5.0, 7.0]) == 0.0

    def test_selection_unique_minimum(self):
        values = [0.0, 1.0, 2.0]
        assert harness._select_best(values, [5.0, 1.0, 7.0]) == 1.0

    def test_selection_skips_failed_cells(self):
        values = [0.0, 1.0]
        assert harness._select_best(values, [None, 3.0]) == 1.0
        with pytest.raises(RuntimeError):
            harness._select_best(values, [None, None])


class TestGridSearch:
    def test_tiny_grid_runs_and_selects(self, tmp_path):
        cfg = tiny_config(
            tmp_path,
            grid_epochs=1,
            beta_grid_start=0.0,
            beta_grid_step=1.0,
            beta_grid_stop=1.0,
            rho_grid_start=0.0,
            rho_grid_step=1.0,
            rho_grid_stop=1.0,
        )
        result = harness.grid_search(cfg)
        assert result.beta_best in (0.0, 1.0)
        assert result.rho_best in (0.0, 1.0)
        assert (tmp_path / "grid.csv").exists()
        lines = (tmp_path / "grid.csv").read_text().splitlines()
        assert lines[0] == "parameter,value,val_loss,status"
        assert len(lines) == 5

    def test_diverged_cell_marked_and_excluded(self, tmp_path, monkeypatch):
        real_train = harness.train

        def unstable_train(init, data, tconf, **kwargs):
            if tconf.rho == 0.75:
                raise vae.TrainingDivergence(0, 0)
            return real_train(init, data, tconf, **kwargs)

        monkeypatch.setattr(harness, "train", unstable_train)
        cfg = tiny_config(
            tmp_path,
            grid_epochs=1,
            beta_grid_start=0.0,
            beta_grid_step=1.0,
            beta_grid_stop=0.0,
            rho_grid_start=0.0,
            rho_grid_step=0.75,
            rho_grid_stop=1.5,
        )
        result = harness.grid_search(cfg)
        assert result.rho_best in (0.0, 1.5)  # the diverged 0.75 cell is excluded
        statuses = {}
        for line in (tmp_path / "grid.csv").read_text().splitlines()[1:]:
            param, value, _, status = line.split(",")
            statuses[(param, float(value))] = status
        assert statuses[("rho", 0.75)] == "diverged"
        assert statuses[("rho", 0.0)] == "ok"


class TestReproducibilityProtocol:
    def test_degenerate_identical_runs_hit_floor(self, tmp_path):
        # Zero learning rate plus one shared seed makes every run identical;
        # per-point covariances collapse and the eigenvalue floor engages.
        from rosettavae import metrics
        from rosettavae.datasets import split_train_val

        data = gen_8gaussians(8, seed=0)
        d1, _ = partition_halfplane(data)
        train_rows, _ = split_train_val(d1, 0.6, seed=1)
        arch = vae.ArchSpec(input_dim=5, latent_dim=2, hidden=(4,))
        tconf = vae.TrainConfig(learning_rate=0.0, epochs=1, batch_size=16, seed=3)
        tables = []
        for _ in range(2):
            model = vae.train(arch, train_rows, tconf).model
            tables.append(distill.embed_dataset(model, d1))
        logvol = metrics.log_volume_per_point(tables, eigen_floor=1e-12)
        assert np.allclose(logvol, 2 * np.log(1e-12), rtol=1e-9)

    def test_report_files_and_traceability(self, tmp_path):
        cfg = tiny_config(tmp_path)
        result = harness.run_reproducibility(cfg)
        out = result.out_dir
        for name in ("report.csv", "report.txt", "runs.csv", "meta.json", "rosetta.txt"):
            assert (out / name).exists()
        meta = json.loads((out / "meta.json").read_text())
        digest = meta["config_digest"]
        runs_lines = (out / "runs.csv").read_text().splitlines()[1:]
        assert len(runs_lines) == 3 * cfg.n_repeats
        methods_seen = set()
        for line in runs_lines:
            cells = line.split(",")
            methods_seen.add(cells[0])
            assert cells[3] == digest
            assert (out / cells[4]).exists()  # checkpoint
            assert (out / cells[5]).exists()  # embedding table
            assert (out / cells[6]).exists()  # trace
        report_methods = {r.method for r in result.report_rows}
        assert methods_seen == report_methods

    def test_byte_identical_reports_across_runs(self, tmp_path):
        cfg_a = tiny_config(tmp_path / "a")
        cfg_b = tiny_config(tmp_path / "b")
        ra = harness.run_reproducibility(cfg_a)
        rb = harness.run_reproducibility(cfg_b)
        for name in ("report.csv", "report.txt", "rosetta.txt"):
            assert read_bytes(ra.out_dir / name) == read_bytes(rb.out_dir / name)

    def test_baselines_never_read_anchor_latents(self, tmp_path, monkeypatch):
        """Poison the anchor latents for baseline runs; their outputs must
        not change, proving the latents never enter a baseline path."""
        cfg = tiny_config(tmp_path / "clean")
        clean = harness.run_reproducibility(cfg)

        original = harness._method_training_inputs

        def poisoned(label, rows, rosetta, anchored_sees_anchor_rows):
            if not label.startswith("r_vae"):
                bad = vae.RosettaSet(
                    inputs=rosetta.inputs,
                    latents=rosetta.latents,
                    selector=rosetta.selector,
                    source_digest=rosetta.source_digest,
                )
                object.__setattr__(bad, "latents", np.full_like(rosetta.latents, np.nan))
                rosetta = bad
            return original(label, rows, rosetta, anchored_sees_anchor_rows)

        monkeypatch.setattr(harness, "_method_training_inputs", poisoned)
        cfg2 = tiny_config(tmp_path / "poisoned")
        poisoned_run = harness.run_reproducibility(cfg2)
        assert read_bytes(clean.out_dir / "report.csv") == read_bytes(
            poisoned_run.out_dir / "report.csv"
        )


class TestSequentialProtocol:
    def test_smoke_and_series_files(self, tmp_path):
        cfg = tiny_config(tmp_path, protocol="sequential")
        result = harness.run_sequential(cfg)
        out = result.out_dir
        assert 1 <= result.epochs_used <= cfg.epochs
        metrics_seen = {r.metric for r in result.report_rows}
        assert metrics_seen == {"lsd_d1", "lsd_d2"}
        spectrum_lines = (out / "series_spectrum.csv").read_text().splitlines()
        # header + methods * runs * latent_dim
        assert len(spectrum_lines) == 1 + 3 * cfg.n_repeats * cfg.latent_dim
        map_lines = (out / "series_map.csv").read_text().splitlines()
        assert len(map_lines) == 1 + 3 * cfg.n_repeats

    def test_template_compared_to_itself_is_zero(self):
        from rosettavae import metrics as m

        rng = np.random.default_rng(0)
        means = rng.standard_normal((40, 2))
        fit = m.fit_affine(means, means)
        assert m.lsd(fit, means[:20], means[:20]) == pytest.approx(0.0, abs=1e-16)
        assert m.lsd(fit, means[20:], means[20:]) == pytest.approx(0.0, abs=1e-16)

    def test_vae_rows_normalize_to_zero_median(self, tmp_path):
        cfg = tiny_config(tmp_path, protocol="sequential")
        result = harness.run_sequential(cfg)
        for row in result.report_rows:
            if row.method == "vae":
                assert row.median == pytest.approx(0.0, abs=1e-15)

    def test_requires_partitioned_data(self, tmp_path):
        data = gen_8gaussians(4, seed=0)
        path = tmp_path / "flat.csv"
        from rosettavae.datasets import save_tabular

        save_tabular(data, path)
        cfg = tiny_config(tmp_path, protocol="sequential", data_path=str(path))
        with pytest.raises(ValueError):
            harness.run_sequential(cfg)


class TestAblation:
    def test_rp_count_axis(self, tmp_path):
        cfg = tiny_config(tmp_path, protocol="ablation", rp_counts=(2, 3))
        result = harness.run_ablation(cfg)
        datasets_seen = {r.dataset for r in result.report_rows}
        assert datasets_seen == {"8gaussians[rp_count=2]", "8gaussians[rp_count=3]"}

    def test_selector_axis_normalizes_by_kmeans(self, tmp_path):
        cfg = tiny_config(
            tmp_path,
            protocol="ablation",
            ablation_axis="selector",
            base_protocol="sequential",
        )
        result = harness.run_ablation(cfg)
        methods = {r.method for r in result.report_rows}
        assert methods == {
            "r_vae[kmeans]",
            "r_vae[agglomerative]",
            "r_vae[gmm]",
            "r_vae[random]",
        }
        metrics_seen = {r.metric for r in result.report_rows}
        assert metrics_seen == {"lsd_d1", "lsd_d2", "rv_d1", "rv_d2"}
        for row in result.report_rows:
            assert row.norm_choice == "r_vae[kmeans]_median_subtracted"
            if row.method == "r_vae[kmeans]" and row.metric.startswith("lsd"):
                assert row.median == pytest.approx(0.0, abs=1e-15)

    def test_architecture_axis(self, tmp_path):
        cfg = tiny_config(
            tmp_path,
            protocol="ablation",
            ablation_axis="architecture",
            base_protocol="reproducibility",
            hidden=(8,),
        )
        result = harness.run_ablation(cfg)
        methods = {r.method for r in result.report_rows}
        assert methods == {"r_vae[simple]", "r_vae[same]", "r_vae[complex]"}

    def test_unknown_axis_rejected(self, tmp_path):
        cfg = tiny_config(tmp_path, protocol="ablation", ablation_axis="bogus")
        with pytest.raises(ValueError):
            harness.run_ablation(cfg)


class TestExportEmbeddings:
    def test_zero_model_exports_zero_means(self, tmp_path):
        from rosettavae import autodiff as ad

        arch = vae.ArchSpec(input_dim=5, latent_dim=2, hidden=(4,))
        model = vae.init_model(arch, seed=0)
        arrays = {k: np.zeros_like(v) for k, v in model.params.items()}
        model = vae.ModelState(arch, ad.ParamSet(arrays), model.provenance)
        data = gen_8gaussians(2, seed=0)
        path = tmp_path / "emb.csv"
        harness.export_embeddings(model, data, path)
        back = load_tabular(path)
        assert len(back) == len(data)
        means = back.inputs[:, 1:3]
        assert np.array_equal(means, np.zeros_like(means))

    def test_roundtrips_through_load_tabular(self, tmp_path):
        arch = vae.ArchSpec(input_dim=5, latent_dim=2, hidden=(4,))
        model = vae.init_model(arch, seed=3)
        data = gen_8gaussians(2, seed=1)
        path = tmp_path / "emb.csv"
        harness.export_embeddings(model, data, path)
        back = load_tabular(path)
        means, chols = vae.posterior_table(model, data.inputs)
        assert np.array_equal(back.inputs[:, 1:3], means)
        assert np.array_equal(back.inputs[:, 3:], chols)


class TestWorkerParallelism:
    def test_worker_count_env(self, monkeypatch):
        monkeypatch.delenv(harness.WORKERS_ENV, raising=False)
        assert harness.worker_count() == 1
        monkeypatch.setenv(harness.WORKERS_ENV, "3")
        assert harness.worker_count() == 3
        monkeypatch.setenv(harness.WORKERS_ENV, "junk")
        assert harness.worker_count() == 1

    def test_parallel_matches_serial(self, tmp_path, monkeypatch):
        cfg_serial = tiny_config(tmp_path / "serial")
        serial = harness.run_reproducibility(cfg_serial)
        monkeypatch.setenv(harness.WORKERS_ENV, "2")
        cfg_par = tiny_config(tmp_path / "parallel")
        parallel = harness.run_reproducibility(cfg_par)
        assert read_bytes(serial.out_dir / "report.csv") == read_bytes(
            parallel.out_dir / "report.csv"
        )


class TestAnchorRowMatching:
    def test_match_recovers_indices(self):
        data = gen_8gaussians(5, seed=2)
        d1, _ = partition_halfplane(data)
        rows = d1.inputs
        anchors = rows[[7, 0, 3]]
        idx = harness._match_anchor_indices(rows, anchors)
        assert idx.tolist() == [7, 0, 3]

    def test_missing_anchor_rejected(self):
        rows = np.zeros((4, 3))
        with pytest.raises(ValueError):
            harness._match_anchor_indices(rows, np.ones((1, 3)))
