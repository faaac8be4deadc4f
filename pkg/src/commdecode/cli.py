"""Command-line pipeline: plan, train, generate, decode, evaluate, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .demos import MessageMapping, assign_messages, generate_demos, load_demos
from .env import all_pairs, manhattan
from .equiv import goal_signalling_micro, verify_optimal_union
from .errors import CommDecodeError, NumericError
from .exact_decoder import EmptyIntersectionWarning, decode_dataset, goal_sets_table, goal_sets_to_json
from .planner import DifferentiablePolicy, QTable, distill_policy, greedy_rollout, value_iteration
from .report import render_heatmaps
from .state_decoder import (DecoderParams, evaluate, passes_headline, train_state_decoder,
                            write_heatmap_csv)
from .transition import (TransitionModel, dataset_loss, generate_transitions, rollout_accuracy,
                         train_transition)

log = logging.getLogger("commdecode")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_ASSERT = 0, 1, 2, 3, 4
# fixed per-stage streams so stages can be rerun independently
STAGE_STREAMS = {"plan": 1, "train-transition": 2, "gen-demos": 3, "train-decoder": 4}
MIN_DEMOS_PER_GOAL = 100

ARTIFACTS = {
    "qtable": "qtable.csv",
    "policy": "policy.json",
    "transitions": "transitions.jsonl",
    "transition": "transition.json",
    "transition_log": "transition_log.csv",
    "transition_metrics": "transition_metrics.json",
    "mapping": "mapping.json",
    "demos": "demos.jsonl",
    "demos_meta": "demos_meta.json",
    "decoder": "decoder.json",
    "decoder_log": "decoder_log.csv",
    "goal_sets": "goal_sets.json",
    "goal_sets_table": "goal_sets.txt",
    "exact_metrics": "exact_metrics.json",
    "metrics": "metrics.json",
    "heatmaps_csv": "heatmaps.csv",
    "heatmaps_svg": "heatmaps.svg",
    "equiv_instance": "equiv_instance.json",
    "equiv_report": "equiv_report.json",
    "plan_metrics": "plan_metrics.json",
}


class MissingArtifact(CommDecodeError):
    def __init__(self, path: Path):
        super().__init__(f"missing input artifact: {path}")
        self.path = path


class AcceptanceFailure(CommDecodeError):
    pass


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


class Run:
    """One pipeline invocation bound to a config and an output directory."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.grid = cfg.grid

    def path(self, name: str) -> Path:
        return self.out / ARTIFACTS[name]

    def need(self, *names: str) -> list[Path]:
        paths = [self.path(n) for n in names]
        for p in paths:
            if not p.exists():
                raise MissingArtifact(p)
        return paths

    def rng(self, stage: str) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, STAGE_STREAMS[stage]])

    def record(self, stage: str, inputs: list[str], outputs: list[str]) -> None:
        (self.out / "config.json").write_text(self.cfg.to_json())
        manifest_path = self.out / "manifest.json"
        manifest = {"stages": {}}
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
        manifest["config_sha256"] = self.cfg.digest()
        manifest["seed"] = self.cfg.seed
        manifest["versions"] = {"commdecode": __version__, "numpy": np.__version__,
                                "python": platform.python_version()}
        manifest["stages"][stage] = {
            "config_sha256": self.cfg.digest(),
            "seed": self.cfg.seed,
            "inputs": {ARTIFACTS[n]: sha256_file(self.path(n)) for n in inputs},
            "outputs": {ARTIFACTS[n]: sha256_file(self.path(n)) for n in outputs},
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        _dump_json(manifest_path, manifest)

    # ------------------------------------------------------------ stages

    def load_q(self) -> QTable:
        (path,) = self.need("qtable")
        return QTable.load_csv(path, self.grid)

    def plan(self) -> None:
        q = value_iteration(self.grid)
        q.save_csv(self.path("qtable"))
        policy = distill_policy(q, self.cfg.distill, self.rng("plan"))
        policy.save(self.path("policy"))
        lengths_ok = True
        for s in all_pairs(self.grid):
            path = greedy_rollout(policy, s, self.grid.horizon)
            lengths_ok &= len(path) == manhattan(s.listener, s.goal) and path[-1] == s.goal
        _dump_json(self.path("plan_metrics"), {"sweeps": q.sweeps, "greedy_rollouts_optimal": lengths_ok})
        log.info("plan: %d sweeps, distilled policy optimal on all pairs: %s", q.sweeps, lengths_ok)
        self.record("plan", [], ["qtable", "policy", "plan_metrics"])

    def train_transition(self) -> None:
        (policy_path,) = self.need("policy")
        policy = DifferentiablePolicy.load(policy_path)
        tc = self.cfg.raw["transition"]
        rng = self.rng("train-transition")
        data = generate_transitions(policy, self.grid, tc["count"], rng)
        data.save_jsonl(self.path("transitions"))
        result = train_transition(data, self.grid, rng, lr=tc["lr"], steps=tc["steps"],
                                  batch_size=tc["batch_size"], hidden=tuple(tc["hidden"]))
        result.model.save(self.path("transition"))
        with open(self.path("transition_log"), "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["step", "loss"])
            out.writerows((i + 1, repr(v)) for i, v in enumerate(result.losses))
        below = next((i + 1 for i, v in enumerate(result.losses) if v < 1e-3), None)
        acc = rollout_accuracy(result.model, policy, self.grid, tc["eval_episodes"], rng)
        metrics = {"dataset_loss": dataset_loss(result.model, data), "first_step_below_1e-3": below,
                   "rollout_accuracy": acc, "samples": len(data)}
        _dump_json(self.path("transition_metrics"), metrics)
        log.info("train-transition: loss %.2e, rollout accuracy %.4f", metrics["dataset_loss"], acc)
        self.record("train-transition", ["policy"],
                    ["transitions", "transition", "transition_log", "transition_metrics"])

    def gen_demos(self) -> None:
        q = self.load_q()
        dc = self.cfg.raw["demos"]
        mapping = assign_messages(self.grid, self.cfg.mapping_seed)
        self.path("mapping").write_text(mapping.to_json())
        seed = int(self.rng("gen-demos").integers(2**32))
        dataset = generate_demos(q, mapping, dc["count"], dc["temperature"], self.grid, seed)
        dataset.save_jsonl(self.path("demos"))
        _dump_json(self.path("demos_meta"), dataset.metadata)
        log.info("gen-demos: %d demos, %d discarded", len(dataset),
                 dataset.metadata["discarded_nonterminating"])
        self.record("gen-demos", ["qtable"], ["mapping", "demos", "demos_meta"])

    def train_decoder(self) -> None:
        policy_path, tm_path, map_path = self.need("policy", "transition", "mapping")
        q = self.load_q()
        policy = DifferentiablePolicy.load(policy_path)
        tmodel = TransitionModel.load(tm_path)
        mapping = MessageMapping.from_json(map_path.read_text())
        result = train_state_decoder(self.grid, self.cfg.decoder, policy, tmodel, q, mapping,
                                     self.rng("train-decoder"))
        result.params.save(self.path("decoder"))
        result.write_log(self.path("decoder_log"))
        self.record("train-decoder", ["qtable", "policy", "transition", "mapping"],
                    ["decoder", "decoder_log"])

    def decode_exact(self) -> None:
        (demo_path,) = self.need("demos")
        q = self.load_q()
        blind = load_demos(demo_path, with_oracle=False)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", EmptyIntersectionWarning)
            goal_sets = decode_dataset(blind, q, self.grid)
        for w in caught:
            log.warning("%s", w.message)
        self.path("goal_sets").write_text(goal_sets_to_json(goal_sets))
        self.path("goal_sets_table").write_text(goal_sets_table(goal_sets))
        truth = {d.message: d.goal for d in load_demos(demo_path) if d.goal is not None}
        sound = [truth[m] in cells for m, cells in goal_sets.items() if m in truth]
        metrics = {"messages": len(goal_sets),
                   "sound_fraction": float(np.mean(sound)) if sound else None,
                   "mean_goal_set_size": float(np.mean([len(c) for c in goal_sets.values()])),
                   "singletons": sum(1 for c in goal_sets.values() if len(c) == 1)}
        _dump_json(self.path("exact_metrics"), metrics)
        log.info("decode-exact: %s", metrics)
        self.record("decode-exact", ["qtable", "demos"],
                    ["goal_sets", "goal_sets_table", "exact_metrics"])

    def eval_decoder(self, assert_thresholds: bool = False) -> None:
        dec_path, demo_path = self.need("decoder", "demos")
        params = DecoderParams.load(dec_path)
        metrics = evaluate(params, load_demos(demo_path))
        heatmaps = metrics.pop("heatmaps")
        write_heatmap_csv(heatmaps, self.path("heatmaps_csv"))
        render_heatmaps(self.path("heatmaps_csv"), self.path("heatmaps_svg"))
        ok, reasons = passes_headline(metrics)
        fewest = min(g["n"] for g in metrics["per_goal"].values())
        if fewest < MIN_DEMOS_PER_GOAL:
            ok = False
            reasons.append(f"only {fewest} evaluation demos for some goal")
        metrics["passes_thresholds"] = ok
        metrics["failures"] = reasons
        _dump_json(self.path("metrics"), metrics)
        log.info("eval-decoder: accuracy %.3f, %d/%d goals exact", metrics["accuracy"],
                 metrics["goals_exact"], metrics["goals_total"])
        self.record("eval-decoder", ["decoder", "demos"], ["metrics", "heatmaps_csv", "heatmaps_svg"])
        if assert_thresholds and not ok:
            raise AcceptanceFailure("; ".join(reasons))

    def analyze_equiv(self) -> None:
        ec = self.cfg.raw["equiv"]
        m = goal_signalling_micro(ec["width"], ec["height"], tuple(map(tuple, ec["goals"])),
                                  ec["alphabet_size"], ec["horizon"])
        self.path("equiv_instance").write_text(m.to_json())
        report = verify_optimal_union(m)
        _dump_json(self.path("equiv_report"), report.to_dict())
        print(report.table(), end="")
        self.record("analyze-equiv", [], ["equiv_instance", "equiv_report"])

    def all(self) -> None:
        self.plan()
        self.train_transition()
        self.gen_demos()
        self.train_decoder()
        self.decode_exact()
        self.eval_decoder()
        self.analyze_equiv()


STAGES = {
    "plan": "value iteration and policy distillation",
    "train-transition": "generate transitions and fit the transition model",
    "gen-demos": "message mapping and demonstration corpus",
    "train-decoder": "train the state decoder",
    "decode-exact": "exact goal sets per message",
    "eval-decoder": "decoder metrics and heatmaps",
    "analyze-equiv": "equivalence-class report on a micro instance",
    "all": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="commdecode", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in STAGES.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON run config (defaults apply to missing keys)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config value, e.g. decoder.total_steps=500")
        p.add_argument("--seed", type=int, help="overrides COMMDECODE_SEED and the config seed")
        p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "eval-decoder":
            p.add_argument("--assert", dest="assert_thresholds", action="store_true",
                           help="exit with status 4 when the headline thresholds are missed")
    r = sub.add_parser("render-heatmaps", help="render a heatmap CSV to SVG")
    r.add_argument("csv", type=Path)
    r.add_argument("svg", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "render-heatmaps":
            if not args.csv.exists():
                raise MissingArtifact(args.csv)
            render_heatmaps(args.csv, args.svg)
            return EXIT_OK
        cfg = RunConfig.load(args.config, args.overrides, args.seed)
        out = args.out if args.out is not None else Path(cfg.raw["output_dir"])
        run = Run(cfg, out)
        if args.command == "eval-decoder":
            run.eval_decoder(args.assert_thresholds)
        else:
            getattr(run, args.command.replace("-", "_"))()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        if args.command != "render-heatmaps" and getattr(exc, "filename", None) == str(args.config):
            print(f"config error: cannot read {args.config}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"missing file: {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    except MissingArtifact as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AcceptanceFailure as exc:
        print(f"acceptance thresholds missed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except CommDecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
