"""Command-line harness: staged training, retention/retrieval evaluation,
ablations, and the compression-arithmetic simulator.

Exit codes: 0 ok, 2 usage/config error, 3 stage-order violation, 4 I/O.
The MNEMO_SEED environment variable overrides the config seed; an explicit
--seed flag overrides both.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import checkpoint, curriculum, evals, memory as memory_mod, tiering
from .config import EvalConfig, ModelConfig
from .curriculum import CurriculumConfig
from .model import MPlusModel
from .retriever import project
from .rng import Rng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STATE = 3
EXIT_IO = 4


class ConfigError(Exception):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclasses.dataclass
class RunConfig:
    seed: int
    model: ModelConfig
    curriculum: CurriculumConfig
    eval: EvalConfig

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "curriculum": self.curriculum.to_dict(),
            "eval": self.eval.to_dict(),
        }


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown field")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e))


def load_run_config(path: str | None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            with open(path) as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(path, "config file not found")
        except json.JSONDecodeError as e:
            raise ConfigError(path, f"invalid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(path or "<config>", "top level must be a JSON object")
    for key in data:
        if key not in ("seed", "model", "curriculum", "eval"):
            raise ConfigError(key, "unknown field")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed", "must be a non-negative integer")
    return RunConfig(
        seed=seed,
        model=_build_section(ModelConfig, data.get("model", {}), "model"),
        curriculum=_build_section(CurriculumConfig, data.get("curriculum", {}), "curriculum"),
        eval=_build_section(EvalConfig, data.get("eval", {}), "eval"),
    )


def resolve_seed(cfg_seed: int, flag_seed: int | None) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("MNEMO_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError("MNEMO_SEED", f"not an integer: {env!r}")
    return cfg_seed


def load_model(ckpt_dir: str) -> tuple[MPlusModel, ModelConfig, ModelConfig, dict]:
    arrays, extra = checkpoint.load_tensors(ckpt_dir)
    if extra.get("kind") != "model":
        raise checkpoint.CheckpointError(f"{ckpt_dir} is not a model checkpoint")
    base_cfg = ModelConfig.from_dict(extra["model_config"])
    stage_cfg = ModelConfig.from_dict(extra["stage_config"])
    model = MPlusModel(base_cfg, Rng(0))
    model.load_state_arrays(arrays)
    return model, base_cfg, stage_cfg, extra


def _report_header(run_cfg: RunConfig, seed: int) -> dict:
    return {
        "config_digest": evals.config_digest(run_cfg.to_dict()),
        "build_id": evals.build_id(),
        "seed": seed,
    }


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    seed = resolve_seed(run_cfg.seed, args.seed)
    corpus = curriculum.make_corpus(seed, run_cfg.curriculum, vocab=run_cfg.model.vocab)
    prev = args.prev
    if prev is None and args.stage > 1:
        candidate = os.path.join(args.out, f"stage{args.stage - 1}")
        if os.path.isdir(candidate):
            prev = candidate
    result = curriculum.run_stage(
        args.stage, run_cfg.model, run_cfg.curriculum, corpus, seed, args.out, prev
    )
    report = {**_report_header(run_cfg, seed), "stage": args.stage, **result}
    with open(os.path.join(args.out, f"stage{args.stage}_report.json"), "w") as f:
        json.dump(report, f, indent=2)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _eval_setup(args):
    run_cfg = load_run_config(args.config)
    seed = resolve_seed(run_cfg.seed, args.seed)
    model, base_cfg, stage_cfg, extra = load_model(args.checkpoint)
    cur = run_cfg.curriculum
    probes = evals.make_probes(seed, run_cfg.eval.n_probes, cur, base_cfg.vocab)
    distractors = evals.make_distractors(
        seed, run_cfg.eval.n_distractors, cur.chunk_len, base_cfg.vocab
    )
    return run_cfg, seed, model, base_cfg, stage_cfg, probes, distractors


def _distractor_counts(run_cfg: RunConfig, max_distractors: int | None) -> list[int]:
    counts = run_cfg.eval.distractor_counts
    if max_distractors is not None:
        counts = sorted({j for j in counts if j <= max_distractors} | {max_distractors})
    return counts


def cmd_eval_retention(args) -> int:
    run_cfg, seed, model, base_cfg, stage_cfg, probes, distractors = _eval_setup(args)
    counts = _distractor_counts(run_cfg, args.max_distractors)
    need = max(counts) if counts else 0
    if need > len(distractors):
        distractors = evals.make_distractors(seed, need, run_cfg.curriculum.chunk_len, base_cfg.vocab)
    curve = evals.eval_retention(
        model, stage_cfg, probes, distractors, counts, args.ablation, seed,
        config_for_digest=run_cfg.to_dict(),
    )
    policy = tiering.TierPolicy(mode=tiering.RESIDENT)
    report = {
        **_report_header(run_cfg, seed),
        "checkpoint": args.checkpoint,
        "tiering": policy.counters(),
        **curve.to_dict(),
    }
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2)
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["injected_distractor_tokens", "recall_accuracy", "n_questions"])
        for p in curve.points:
            w.writerow([p.injected_distractor_tokens, p.recall_accuracy, p.n_questions])
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_eval_retrieval_quality(args) -> int:
    run_cfg, seed, model, base_cfg, stage_cfg, probes, distractors = _eval_setup(args)
    counts = _distractor_counts(run_cfg, args.max_distractors)
    trace_rows: list = []
    evals.eval_retention(
        model, stage_cfg, probes, distractors, counts, "mplus", seed,
        config_for_digest=run_cfg.to_dict(), trace_rows=trace_rows,
    )
    k0 = base_cfg.K0
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ["probe", "distractor_chunks", "layer", "in_ltm", "retrieved",
             "ltm_size", "trained_fraction", "random_baseline"]
        )
        for row in trace_rows:
            frac = row["retrieved"] / row["in_ltm"] if row["in_ltm"] else ""
            base = min(k0, row["ltm_size"]) / row["ltm_size"] if row["ltm_size"] else ""
            w.writerow(
                [row["probe"], row["distractor_chunks"], row["layer"],
                 row["in_ltm"], row["retrieved"], row["ltm_size"], frac, base]
            )
    summary = evals.retrieval_advantage(trace_rows, k0, min_archive=4 * k0)
    print(json.dumps({**_report_header(run_cfg, seed), **summary}, indent=2))
    return EXIT_OK


def cmd_eval_ablation_attn(args) -> int:
    args.ablation = "attn_retrieval"
    return cmd_eval_retention(args)


def cmd_simulate_retention(args) -> int:
    rows = []
    survival = (args.N - args.K) / args.N
    for j in range(args.chunks):
        # chunk j's K tokens have weathered (chunks - 1 - j) later updates
        closed = args.K * survival ** (args.chunks - 1 - j)
        rows.append({"chunk_index": j, "expected_surviving": closed})
    if args.trials > 0 and args.chunks > 0:
        mc = memory_mod.simulate_survival(args.N, args.K, args.chunks, args.trials, args.seed or 0)
        for j, row in enumerate(rows):
            row["monte_carlo_surviving"] = mc[j]
    total = memory_mod.expected_compressed_count(args.N, args.K, args.chunks)
    with open(args.out, "w", newline="") as f:
        names = ["chunk_index", "expected_surviving"] + (
            ["monte_carlo_surviving"] if args.trials > 0 and args.chunks > 0 else []
        )
        w = csv.DictWriter(f, fieldnames=names)
        w.writeheader()
        w.writerows(rows)
    print(json.dumps({"N": args.N, "K": args.K, "chunks": args.chunks,
                      "expected_total_surviving": total}, indent=2))
    return EXIT_OK


def cmd_reindex(args) -> int:
    mem = memory_mod.MemoryState.load(args.memory)
    model, _, _, _ = load_model(args.checkpoint)
    for l in range(mem.config.L):
        tokens = mem.ltm_tokens[l]
        if tokens:
            keys = project(model, model.retriever_prefix(l), "fk",
                           np.stack([t.vector for t in tokens]))
            mem.ltm_keys[l] = list(keys)
    mem.save(args.out)
    print(json.dumps({"reindexed_layers": mem.config.L, "out": args.out}))
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mnemo", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one curriculum stage")
    t.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--prev", help="previous-stage checkpoint dir (default: OUT/stage{n-1})")
    t.set_defaults(func=cmd_train)

    def eval_common(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--max-distractors", type=int, default=None)
        sp.add_argument("--out", required=True)

    e = sub.add_parser("eval-retention", help="distractor-injection retention sweep")
    eval_common(e)
    e.add_argument("--ablation", default="mplus")
    e.set_defaults(func=cmd_eval_retention)

    q = sub.add_parser("eval-retrieval-quality", help="ground-truth token tracking")
    eval_common(q)
    q.set_defaults(func=cmd_eval_retrieval_quality)

    a = sub.add_parser("eval-ablation-attn", help="attention-score retrieval ablation")
    eval_common(a)
    a.set_defaults(func=cmd_eval_ablation_attn)

    s = sub.add_parser("simulate-retention", help="random-dropping survival arithmetic")
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--K", type=int, required=True)
    s.add_argument("--chunks", type=int, required=True)
    s.add_argument("--trials", type=int, default=0)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate_retention)

    r = sub.add_parser("reindex", help="recompute archive keys with the current key projector")
    r.add_argument("--memory", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reindex)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except curriculum.StageOrderError as e:
        print(f"stage-order error: {e}", file=sys.stderr)
        return EXIT_STATE
    except (OSError, checkpoint.CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
