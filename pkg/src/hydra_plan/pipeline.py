"""Staged experiment pipeline with content-addressed caching.

Each stage hashes its effective inputs (the relevant config slice plus the
hashes of upstream artifacts).  A stage is skipped when the manifest records
the same input hash and all its output files still match their recorded
content hashes; otherwise it is rebuilt.  The run manifest at the root of the
output directory carries the resolved config, so every artifact is
reproducible from the manifest alone.
"""

from __future__ import annotations

import hashlib
import json
import os
import time

import numpy as np

from dataclasses import asdict

from . import infer as infer_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import train as train_mod
from . import vocab as vocab_mod
from . import world as world_mod
from .errors import PipelineError
from .infer import GridConfig
from .train import ABLATION_ROWS, ExperimentConfig, config_hash

TOOL_VERSION = "0.1.0"
STAGES = ("vocab", "build-data", "simulate", "fit", "search-weights", "eval", "report")
MANIFEST_NAME = "manifest.json"


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _hash_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class PipelineRun:
    """Mutable pipeline state bound to one output directory."""

    def __init__(self, config: ExperimentConfig, out_dir):
        self.config = config
        self.out_dir = str(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)
        self.manifest_path = os.path.join(self.out_dir, MANIFEST_NAME)
        if os.path.exists(self.manifest_path):
            with open(self.manifest_path) as fh:
                self.manifest = json.load(fh)
        else:
            self.manifest = {
                "tool_version": TOOL_VERSION,
                "config": config.to_dict(),
                "config_hash": config_hash(config),
                "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                "stages": {},
            }
        if self.manifest.get("config_hash") != config_hash(config):
            # a different config invalidates every cached stage
            self.manifest["config"] = config.to_dict()
            self.manifest["config_hash"] = config_hash(config)
            self.manifest["stages"] = {}
        self._vocab = None
        self._splits = {}

    # -- caching machinery -------------------------------------------------

    def _save_manifest(self):
        self.manifest["updated_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        self.manifest["tool_version"] = TOOL_VERSION
        with open(self.manifest_path, "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def _outputs_intact(self, record):
        for rel, digest in record.get("outputs", {}).items():
            path = os.path.join(self.out_dir, rel)
            if not os.path.exists(path) or _hash_file(path) != digest:
                return False
        return True

    def _run_stage(self, name, input_hash, build):
        """Run `build` unless the manifest shows an intact, matching stage."""
        record = self.manifest["stages"].get(name)
        if record and record.get("input_hash") == input_hash and self._outputs_intact(record):
            return False
        try:
            outputs = build()
        except Exception as exc:
            raise PipelineError(f"stage '{name}' failed: {exc}") from exc
        self.manifest["stages"][name] = {
            "input_hash": input_hash,
            "outputs": {rel: _hash_file(os.path.join(self.out_dir, rel)) for rel in outputs},
        }
        self._save_manifest()
        return True

    def _path(self, *parts):
        path = os.path.join(self.out_dir, *parts)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    # -- individual stages -------------------------------------------------

    def stage_vocab(self):
        cfg = self.config
        input_hash = _hash_obj({
            "kinematics": cfg.kinematics.to_dict(),
            "n": cfg.vocab_samples, "k": cfg.vocab_size, "seed": cfg.vocab_seed,
            "heading_weight": cfg.heading_weight,
            "max_iters": cfg.kmeans_max_iters, "tol": cfg.kmeans_tol,
        })

        def build():
            vocab = train_mod.build_vocabulary(cfg)
            vocab_mod.save_vocabulary(
                self._path("vocab", "vocabulary.vocab"), vocab,
                provenance={
                    "seed": cfg.vocab_seed, "n_samples": cfg.vocab_samples,
                    "kinematics": cfg.kinematics.to_dict(),
                    "tool_version": TOOL_VERSION,
                },
            )
            self._vocab = vocab
            return ["vocab/vocabulary.vocab", "vocab/vocabulary.vocab.json"]

        return self._run_stage("vocab", input_hash, build)

    def vocabulary(self):
        if self._vocab is None:
            self._vocab = vocab_mod.load_vocabulary(self._path("vocab", "vocabulary.vocab"))
        return self._vocab

    def _stage_outputs(self, name):
        record = self.manifest["stages"].get(name)
        if record is None:
            raise PipelineError(f"stage '{name}' has not run in this output directory")
        return record["outputs"]

    @property
    def vocab_hash(self):
        return self._stage_outputs("vocab")["vocab/vocabulary.vocab"]

    def stage_build_data(self):
        cfg = self.config
        input_hash = _hash_obj({
            "world": cfg.world.to_dict(), "observation": cfg.observation.to_dict(),
            "splits": [cfg.n_train, cfg.n_val, cfg.n_test], "base_seed": cfg.base_seed,
            "sigma": cfg.imitation_sigma, "heading_weight": cfg.heading_weight,
            "vocab": self.vocab_hash,
        })

        def build():
            vocab = self.vocabulary()
            outputs = []
            base = os.path.join(self.out_dir, "data")
            os.makedirs(base, exist_ok=True)
            for split in ("train", "val", "test"):
                data = train_mod.build_split(cfg, split, vocab, with_labels=False)
                world_mod.save_scenarios(
                    os.path.join(base, split + world_mod.SCENARIO_FILE_SUFFIX),
                    data.scenarios,
                )
                np.save(os.path.join(base, f"obs_{split}.npy"), data.rasters)
                np.save(os.path.join(base, f"status_{split}.npy"), data.statuses)
                np.save(os.path.join(base, f"targets_{split}.npy"), data.targets)
                outputs += [
                    f"data/{split}{world_mod.SCENARIO_FILE_SUFFIX}",
                    f"data/obs_{split}.npy", f"data/status_{split}.npy",
                    f"data/targets_{split}.npy",
                ]
            return outputs

        return self._run_stage("build-data", input_hash, build)

    def stage_simulate(self):
        cfg = self.config
        scen_hashes = {
            split: self._stage_outputs("build-data")[
                f"data/{split}{world_mod.SCENARIO_FILE_SUFFIX}"
            ]
            for split in ("train", "val", "test")
        }
        input_hash = _hash_obj({
            "scenarios": scen_hashes, "vocab": self.vocab_hash,
            "limits": asdict(cfg.limits), "tau": cfg.tau,
            "ego": [cfg.world.ego_half_length, cfg.world.ego_half_width],
        })

        def build():
            vocab = self.vocabulary()
            ego_dims = (cfg.world.ego_half_length, cfg.world.ego_half_width)
            outputs = []
            base = os.path.join(self.out_dir, "data")
            for split in ("train", "val", "test"):
                scenarios = world_mod.load_scenarios(
                    os.path.join(base, split + world_mod.SCENARIO_FILE_SUFFIX)
                )
                labels = metrics_mod.simulate_many(scenarios, vocab, ego_dims=ego_dims,
                                                   limits=cfg.limits, tau=cfg.tau)
                metrics_mod.save_labels(os.path.join(base, f"labels_{split}"), labels)
                outputs += [f"data/labels_{split}.npy", f"data/labels_{split}.json"]
            return outputs

        return self._run_stage("simulate", input_hash, build)

    def load_split(self, split):
        if split not in self._splits:
            expected = vocab_mod.vocabulary_hash(self.vocabulary())
            self._splits[split] = train_mod.load_split(
                os.path.join(self.out_dir, "data"), split,
                self.config.observation.cell_size, expected_vocab_hash=expected,
            )
        return self._splits[split]

    def _needed_variants(self):
        rows = [ABLATION_ROWS[name] for name in self.config.ablations]
        variants = []
        for distillation, _ in rows:
            if distillation not in variants:
                variants.append(distillation)
        if self.config.distillation not in variants:
            variants.append(self.config.distillation)
        return variants

    def _ckpt_rel(self, variant, seed, which):
        return f"models/{variant}-seed{seed}/checkpoint_{which}.ckpt"

    def stage_fit(self):
        cfg = self.config
        data_hashes = self._stage_outputs("simulate")
        input_hash = _hash_obj({
            "data": data_hashes, "optimizer": asdict(cfg.optimizer),
            "arch": [cfg.encoder_hidden, cfg.n_tokens, cfg.embed_dim, cfg.traj_hidden, cfg.pool],
            "kd_weight": cfg.kd_weight, "seeds": list(cfg.model_seeds),
            "variants": self._needed_variants(), "weights": cfg.cost_weights.to_dict(),
        })

        def build():
            train_data = self.load_split("train")
            val_data = self.load_split("val")
            vocab = self.vocabulary()
            outputs = []
            for variant in self._needed_variants():
                for seed in cfg.model_seeds:
                    result = train_mod.fit(cfg, train_data, val_data, vocab, seed,
                                           distillation=variant)
                    best_rel = self._ckpt_rel(variant, seed, "best")
                    final_rel = self._ckpt_rel(variant, seed, "final")
                    model_mod.save_checkpoint(self._path(*best_rel.split("/")), result.best)
                    model_mod.save_checkpoint(self._path(*final_rel.split("/")), result.final)
                    curve_rel = f"models/{variant}-seed{seed}/curve.csv"
                    train_mod.save_curve(self._path(*curve_rel.split("/")), result.curve)
                    outputs += [best_rel, final_rel, curve_rel]
            return outputs

        return self._run_stage("fit", input_hash, build)

    def stage_search_weights(self):
        cfg = self.config
        fit_hashes = self._stage_outputs("fit")
        input_hash = _hash_obj({
            "fit": fit_hashes, "grid_points": cfg.grid_points,
        })

        def build():
            val_data = self.load_split("val")
            vocab = self.vocabulary()
            grid = GridConfig(points=cfg.grid_points)
            outputs = []
            models = []
            for seed in cfg.model_seeds:
                model = model_mod.load_checkpoint(
                    self._path(*self._ckpt_rel("multi-target", seed, "best").split("/"))
                )
                models.append(model)
                weights = train_mod.search_weights(model, val_data, vocab, grid)
                rel = f"weights/multi-target-seed{seed}.weights"
                infer_mod.save_weights(self._path(*rel.split("/")), weights)
                outputs.append(rel)
            ens_weights = train_mod.search_weights(
                models, val_data, vocab, grid,
                model_weights=np.full(len(models), 1.0 / len(models)),
            )
            rel = "weights/ensemble.weights"
            infer_mod.save_weights(self._path(*rel.split("/")), ens_weights)
            outputs.append(rel)
            return outputs

        needed = "multi-target+w" in self.config.ablations or \
            "multi-target+w+ens" in self.config.ablations or \
            self.config.inference == "assembled-cost+grid"
        if not needed:
            return False
        return self._run_stage("search-weights", input_hash, build)

    def stage_eval(self):
        cfg = self.config
        upstream = dict(self.manifest["stages"].get("fit", {}).get("outputs", {}))
        upstream.update(self.manifest["stages"].get("search-weights", {}).get("outputs", {}))
        input_hash = _hash_obj({
            "upstream": upstream, "ablations": list(cfg.ablations),
            "weights": cfg.cost_weights.to_dict(), "tau": cfg.tau,
        })

        def build():
            test_data = self.load_split("test")
            vocab = self.vocabulary()
            outputs = []
            for name in cfg.ablations:
                distillation, inference = ABLATION_ROWS[name]
                for seed in cfg.model_seeds:
                    models = []
                    weights = None
                    if inference != "post-process":
                        if name == "multi-target+w+ens":
                            models = [
                                model_mod.load_checkpoint(self._path(
                                    *self._ckpt_rel(distillation, s, "best").split("/")))
                                for s in cfg.model_seeds
                            ]
                            weights = infer_mod.load_weights(
                                self._path("weights", "ensemble.weights"))
                        else:
                            models = [model_mod.load_checkpoint(self._path(
                                *self._ckpt_rel(distillation, seed, "best").split("/")))]
                            if inference == "assembled-cost+grid":
                                weights = infer_mod.load_weights(self._path(
                                    "weights", f"multi-target-seed{seed}.weights"))
                    report = train_mod.evaluate(models, None, test_data, vocab, inference,
                                                cfg, cost_weights=weights)
                    rel = f"eval/{name}-seed{seed}"
                    report.save(self._path(*rel.split("/")))
                    outputs += [rel + ".csv", rel + ".json"]
                    if name in ("post-process", "multi-target+w+ens"):
                        break  # model-free / ensemble rows do not vary by seed
            return outputs

        return self._run_stage("eval", input_hash, build)

    def stage_report(self):
        cfg = self.config
        eval_hashes = self._stage_outputs("eval")
        input_hash = _hash_obj({"eval": eval_hashes, "ablations": list(cfg.ablations)})

        def build():
            rows = []
            for name in cfg.ablations:
                seed_means = []
                for seed in cfg.model_seeds:
                    rel = f"eval/{name}-seed{seed}.json"
                    path = os.path.join(self.out_dir, rel)
                    if not os.path.exists(path):
                        break
                    with open(path) as fh:
                        seed_means.append(json.load(fh)["means_x100"])
                stacked = {
                    key: np.array([m[key] for m in seed_means])
                    for key in seed_means[0]
                }
                rows.append({
                    "method": name,
                    **{key: float(v.mean()) for key, v in stacked.items()},
                    "score_range": float(stacked["score"].max() - stacked["score"].min()),
                    "n_seeds": len(seed_means),
                })
            table_rel = "report/table.csv"
            with open(self._path("report", "table.csv"), "w") as fh:
                cols = ["method", "nc", "dac", "ep", "ttc", "comfort", "score",
                        "score_range", "n_seeds"]
                fh.write(",".join(cols) + "\n")
                for row in rows:
                    fh.write(",".join(
                        row["method"] if c == "method" else
                        (str(row[c]) if c == "n_seeds" else f"{row[c]:.3f}")
                        for c in cols
                    ) + "\n")
            with open(self._path("report", "table.txt"), "w") as fh:
                fh.write(format_table(rows))
            return [table_rel, "report/table.txt"]

        return self._run_stage("report", input_hash, build)


def format_table(rows) -> str:
    header = f"{'method':<22}{'NC':>7}{'DAC':>7}{'EP':>7}{'TTC':>7}{'C':>7}{'Score':>8}{'+-':>6}\n"
    lines = [header, "-" * len(header) + "\n"]
    for row in rows:
        lines.append(
            f"{row['method']:<22}{row['nc']:>7.1f}{row['dac']:>7.1f}{row['ep']:>7.1f}"
            f"{row['ttc']:>7.1f}{row['comfort']:>7.1f}{row['score']:>8.1f}"
            f"{row['score_range'] / 2.0:>6.1f}\n"
        )
    return "".join(lines)


def run_pipeline(config: ExperimentConfig, out_dir, stages=None) -> PipelineRun:
    """Execute the requested stages (all by default) in dependency order."""
    requested = list(stages) if stages else list(STAGES)
    for stage in requested:
        if stage not in STAGES:
            raise PipelineError(f"unknown stage '{stage}'")
    run = PipelineRun(config, out_dir)
    # stages must run in dependency order regardless of request order
    for stage in STAGES:
        if stage not in requested:
            continue
        method = {
            "vocab": run.stage_vocab,
            "build-data": run.stage_build_data,
            "simulate": run.stage_simulate,
            "fit": run.stage_fit,
            "search-weights": run.stage_search_weights,
            "eval": run.stage_eval,
            "report": run.stage_report,
        }[stage]
        method()
    return run
