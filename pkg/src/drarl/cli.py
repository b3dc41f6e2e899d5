"""Command-line front end for the disengagement-driven retraining pipeline."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import core
from .agent import Policy, pretrain_original, train_on_cases
from .config import PipelineConfig, load_config
from .evaluate import (
    PolicyEvalResult,
    empty_reason_rate,
    eval_policy_on_cases,
    eval_policy_perturbed,
    identify_cases,
)
from .imagine import build_env
from .ood import trace_reason
from .predictor import (
    PredictorModel,
    build_window,
    extract_windows,
    sample_futures,
    train,
)
from .report import density_snapshot_svg, write_outcome_chart, write_outcome_csv
from .scenarios import FAMILIES, ScenarioSpec, gen_scenario


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="override the pipeline seed")
    p.add_argument("--config", type=Path, default=None, help="JSON pipeline config")


def _pipeline(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.reason = replace(cfg.reason, seed=args.seed)
    return cfg


def _load_cases(paths: list[Path]) -> list[core.DisengagementCase]:
    files: list[Path] = []
    for p in paths:
        if p.is_dir():
            files.extend(sorted(p.glob("*.case.jsonl")))
        else:
            files.append(p)
    if not files:
        raise SystemExit("no case files found")
    return [core.load_case(f) for f in files]


def cmd_generate(args):
    outdir = args.out
    outdir.mkdir(parents=True, exist_ok=True)
    base = args.start_seed if args.seed is None else args.seed
    for i in range(args.count):
        seed = base + i
        case = gen_scenario(ScenarioSpec(args.family, seed))
        path = outdir / f"{args.family}_{seed}.case.jsonl"
        core.save_case(case, path)
        print(f"wrote {path} ({len(case.frames)} frames)")


def cmd_pretrain(args):
    cfg = _pipeline(args)
    episodes = args.episodes or cfg.pretrain_episodes
    policy, buffer, report = pretrain_original(episodes, cfg.seed, cfg.sac)
    policy.save(args.policy)
    core.save_buffer(buffer, args.buffer)
    print(f"pretrained on {report.episodes} nominal episodes; "
          f"pass rate {report.outcome_rate('passed'):.2f}")
    print(f"wrote {args.policy} and {args.buffer}")


def cmd_train_predictor(args):
    cfg = _pipeline(args)
    buffer = core.load_buffer(args.buffer)
    pcfg = cfg.predictor
    if args.epochs is not None:
        pcfg = replace(pcfg, epochs=args.epochs)
    if args.seed is not None:
        pcfg = replace(pcfg, seed=args.seed)
    dataset = extract_windows(buffer)
    model = train(dataset, pcfg)
    model.save(args.out)
    print(f"trained on {dataset.features.shape[0]} windows; "
          f"final nll {model.loss_history[-1]:.4f}")
    print(f"wrote {args.out}")


def cmd_identify(args):
    cfg = _pipeline(args)
    case = core.load_case(args.case)
    model = PredictorModel.load(args.predictor)
    trace = trace_reason(case, model, cfg.reason)
    if trace.reason.empty:
        print("no reason identified (casual disengagement)")
    for el in trace.reason.elements:
        print(f"object {el.uid}: anomalous frames [{el.start_frame}, {el.end_frame}]")
    if args.out:
        doc = {str(el.uid): [el.start_frame, el.end_frame]
               for el in trace.reason.elements}
        args.out.write_text(json.dumps(doc, indent=2) + "\n")
        print(f"wrote {args.out}")
    if args.snapshot and trace.reason.elements:
        el = trace.reason.elements[0]
        t = el.start_frame
        window = build_window(case.frames, el.uid, t - cfg.reason.horizon_frames)
        rng = np.random.default_rng(np.random.SeedSequence(
            [cfg.reason.seed, el.uid & 0x7FFFFFFF, t]))
        futures = sample_futures(model, window, cfg.reason.n_samples,
                                 cfg.reason.horizon_frames, rng)
        rec = case.frames[t].get(el.uid)
        verdict = next(v for v in trace.verdicts
                       if v.uid == el.uid and v.t == t)
        svg = density_snapshot_svg(
            futures.positions, (rec.state.x, rec.state.y), verdict.tail_prob,
            f"object {el.uid} frame {t}")
        args.snapshot.write_text(svg)
        print(f"wrote {args.snapshot}")


def cmd_build_env(args):
    cfg = _pipeline(args)
    case = core.load_case(args.case)
    model = PredictorModel.load(args.predictor)
    reason = trace_reason(case, model, cfg.reason).reason
    if reason.empty:
        raise SystemExit("casual disengagement: no training environment")
    env = build_env(case, reason, np.random.default_rng(cfg.seed), cfg.imagine)
    obs = env.reset()
    done = False
    steps = 0
    while not done:
        obs, _, done, info = env.step((0.0, 0.0))
        steps += 1
    print(f"mode {info['mode']}: coasting episode ended '{info['outcome']}' "
          f"after {steps} steps")


def cmd_train_policy(args):
    cfg = _pipeline(args)
    policy = Policy.load(args.policy)
    cases = _load_cases(args.cases)
    model = PredictorModel.load(args.predictor) if args.predictor else None
    if args.regime in ("drarl", "fixed"):
        if model is None:
            raise SystemExit(f"regime {args.regime} needs --predictor")
        reasons = identify_cases(cases, model, cfg.reason)
    else:
        reasons = [core.ReasonSet() for _ in cases]
    episodes = args.episodes_per_case
    trained, report = train_on_cases(
        policy, cases, reasons, args.regime, cfg.sac, cfg.imagine,
        seed=cfg.seed, episodes_per_case=episodes,
    )
    trained.save(args.out)
    print(f"regime {args.regime}: {report.episodes} episodes, "
          f"{report.skipped_cases} case(s) skipped")
    print(f"wrote {args.out}")


def cmd_evaluate(args):
    cfg = _pipeline(args)
    policy = Policy.load(args.policy)
    if args.perturbed:
        seeds = [int(s) for s in args.perturbed_seeds.split(",")] \
            if args.perturbed_seeds else list(cfg.suite.test_seeds())
        result = eval_policy_perturbed(policy, args.family, seeds)
    else:
        cases = _load_cases(args.cases)
        result = eval_policy_on_cases(policy, cases)
    name = args.name
    print(f"{name}: pass {result.pass_rate:.2f} collision "
          f"{result.collision_rate:.2f} stuck {result.stuck_rate:.2f} "
          f"(n={result.n})")
    if args.out_csv:
        write_outcome_csv({name: result}, args.out_csv)
        print(f"wrote {args.out_csv}")
    if args.out_svg:
        write_outcome_chart({name: result}, args.title, args.out_svg)
        print(f"wrote {args.out_svg}")


def cmd_identify_suite(args):
    cfg = _pipeline(args)
    cases = _load_cases(args.cases)
    model = PredictorModel.load(args.predictor)
    stats = empty_reason_rate(cases, model, cfg.reason)
    print(f"empty-reason rate: {stats.unfiltered_rate:.3f} unfiltered, "
          f"{stats.filtered_rate:.3f} with proximity filter (n={stats.n})")


def cmd_report(args):
    doc = json.loads(args.results.read_text())
    results = {}
    for name, counts in doc.items():
        r = PolicyEvalResult()
        for k, v in counts.items():
            r.counts[k] = int(v)
        results[name] = r
    if args.out_csv:
        write_outcome_csv(results, args.out_csv)
        print(f"wrote {args.out_csv}")
    if args.out_svg:
        write_outcome_chart(results, args.title, args.out_svg)
        print(f"wrote {args.out_svg}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="drarl",
        description="disengagement-reason identification and policy retraining",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="record disengagement cases")
    p.add_argument("--family", choices=[f for f in FAMILIES if f != "nominal"],
                   required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--start-seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("pretrain", help="train the original policy on nominal traffic")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--buffer", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train-predictor", help="fit the future sampler on a replay buffer")
    p.add_argument("--buffer", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_train_predictor)

    p = sub.add_parser("identify", help="trace the disengagement reason of one case")
    p.add_argument("--case", type=Path, required=True)
    p.add_argument("--predictor", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--snapshot", type=Path, default=None,
                   help="write an SVG of the first flagged check")
    _add_common(p)
    p.set_defaults(fn=cmd_identify)

    p = sub.add_parser("identify-suite", help="empty-reason rates over many cases")
    p.add_argument("--cases", type=Path, nargs="+", required=True)
    p.add_argument("--predictor", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_identify_suite)

    p = sub.add_parser("build-env", help="sanity-roll a reason-augmented environment")
    p.add_argument("--case", type=Path, required=True)
    p.add_argument("--predictor", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_build_env)

    p = sub.add_parser("train-policy", help="retrain a policy on recorded cases")
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--cases", type=Path, nargs="+", required=True)
    p.add_argument("--predictor", type=Path, default=None)
    p.add_argument("--regime", choices=("replay", "drarl", "random", "fixed"),
                   default="drarl")
    p.add_argument("--episodes-per-case", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_train_policy)

    p = sub.add_parser("evaluate", help="closed-loop outcome rates for a policy")
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--cases", type=Path, nargs="*", default=[])
    p.add_argument("--perturbed", action="store_true")
    p.add_argument("--family", choices=[f for f in FAMILIES if f != "nominal"],
                   default="dash")
    p.add_argument("--perturbed-seeds", type=str, default=None,
                   help="comma-separated seeds for the perturbed suite")
    p.add_argument("--name", default="policy")
    p.add_argument("--title", default="outcome rates")
    p.add_argument("--out-csv", type=Path, default=None)
    p.add_argument("--out-svg", type=Path, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="tables and charts from saved outcome counts")
    p.add_argument("--results", type=Path, required=True,
                   help="JSON of {name: {outcome: count}}")
    p.add_argument("--title", default="outcome rates")
    p.add_argument("--out-csv", type=Path, default=None)
    p.add_argument("--out-svg", type=Path, default=None)
    p.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    args.fn(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
