"""Command-line entry point: build, simulate, evaluate, synthesize, analyze.

Exit codes: 0 success, 1 usage/configuration error, 2 pipeline failure.
Every report embeds the resolved config digest; reruns in replay mode are
byte-identical.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .builder import build_forest
from .canonical import derive_seed, dumps, loads
from .config import GatewayPool, RunConfig, load_config
from .datasets import PreferencePair, emit_dpo, emit_sft, write_dpo, write_sft
from .errors import AuthenticationError, IntentSimError, MetricsError
from .forest import parse_forest, serialize_forest
from .gateway import ChatResponse
from .metrics import (
    ModelRunSet,
    RunEntry,
    TRIGRAM_CATEGORIES,
    classify_turns,
    discovery_score,
    interactivity_score,
    mean_output_tokens,
    satisfaction_score,
    trigram_distribution,
)
from .orchestrator import (
    GatewayPolicy,
    NullPolicy,
    OraclePolicy,
    ScriptedPolicy,
    Transcript,
    rank_candidates,
    run_trials,
    trial_forest,
)
from .simulator import generate_user_message


class UsageError(IntentSimError):
    """Bad flags, bad config, or inputs that cannot start a run."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1 on usage problems, not 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_json(path: Path, value: dict) -> None:
    _write_text(path, dumps(value) + "\n")


def _collect_files(paths: list[str], suffixes: tuple[str, ...]) -> list[Path]:
    out: list[Path] = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            out.extend(sorted(p for p in path.iterdir() if p.suffix in suffixes))
        elif path.exists():
            out.append(path)
        else:
            raise UsageError(f"input path {raw!r} does not exist")
    if not out:
        raise UsageError("no input files found")
    return out


def _resolved_config(args: argparse.Namespace) -> RunConfig:
    try:
        config = load_config(args.config)
    except (OSError, TypeError, ValueError) as exc:
        raise UsageError(f"cannot load config: {exc}") from exc
    if args.mode:
        config.mode = args.mode
    if args.cassette:
        config.cassette = args.cassette
    if args.seed is not None:
        config.seed = args.seed
    if args.jobs:
        config.jobs = args.jobs
    if args.out:
        config.out_dir = args.out
    if config.mode in ("record", "replay") and not config.cassette:
        raise UsageError(f"--mode {config.mode} requires --cassette")
    config.check_credentials()
    return config


def _make_policy(spec: str, pool: GatewayPool, config: RunConfig):
    if spec == "null":
        return NullPolicy()
    if spec == "oracle":
        return OraclePolicy()
    if spec.startswith("scripted:"):
        path = Path(spec.split(":", 1)[1])
        if not path.exists():
            raise UsageError(f"scripted policy file {path} does not exist")
        data = loads(path.read_text(encoding="utf-8"))
        turns = data if isinstance(data, list) else data.get("turns", [])
        final_text = "" if isinstance(data, list) else data.get("final_text", "")
        if len(turns) < config.max_turns:
            raise UsageError(
                f"scripted policy {path.name} covers {len(turns)} turns; max_turns is {config.max_turns}"
            )
        return ScriptedPolicy(turns, description=f"scripted:{path.stem}", final_text=final_text)
    if spec == "gateway" or spec.startswith("gateway:"):
        template = spec.split(":", 1)[1] if ":" in spec else None
        backend = config.roles["assistant"]
        return GatewayPolicy(
            pool.gateway("assistant"),
            model=backend.model or "assistant",
            description=spec,
            system_template=template,
            temperature=backend.temperature or 0.0,
            max_output=backend.max_output,
        )
    raise UsageError(f"unknown policy spec {spec!r} (null | oracle | scripted:FILE | gateway[:template])")


def _run_parallel(jobs: int, tasks: list) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


# -- build -----------------------------------------------------------------------


def cmd_build(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    pool = GatewayPool(config)
    gateway = pool.gateway("builder")
    artifacts = _collect_files(args.artifacts, (".txt", ".md"))
    out_dir = Path(config.out_dir)
    log: dict = {"config_digest": config.digest(), "artifacts": {}}

    def build_one(path: Path):
        text = path.read_text(encoding="utf-8")
        seed = derive_seed(config.seed, "forest", path.stem)
        try:
            forest, report = build_forest(
                text,
                args.artifact_type,
                gateway,
                seed,
                abstraction_depth=config.abstraction_depth,
                model=config.roles["builder"].model or "builder",
            )
        except IntentSimError as exc:
            raise IntentSimError(f"{path}: {exc}") from exc
        return path.stem, forest, report

    results = _run_parallel(config.jobs, [lambda p=path: build_one(p) for path in artifacts])
    for stem, forest, report in results:
        _write_text(out_dir / "hierarchies" / f"{stem}.json", serialize_forest(forest) + "\n")
        log["artifacts"][stem] = report.to_json()
    _write_json(out_dir / "build_log.json", log)
    print(f"built {len(results)} hierarchy document(s) in {out_dir / 'hierarchies'}")
    return 0


# -- simulate ---------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    pool = GatewayPool(config)
    policy = _make_policy(args.policy, pool, config)
    sim_gateway = pool.gateway("evaluator")
    settings = config.simulation_settings()
    settings.elicit_final = not args.no_final_artifact
    hierarchies = _collect_files(args.hierarchies, (".json",))
    out_dir = Path(config.out_dir)
    summary: dict = {"config_digest": config.digest(), "policy": policy.description, "artifacts": {}}
    aborted = 0

    def simulate_one(path: Path):
        document = path.read_text(encoding="utf-8")
        return path.stem, run_trials(
            document, policy, sim_gateway, settings, n_trials=config.n_trials, artifact_id=path.stem
        )

    results = _run_parallel(config.jobs, [lambda p=path: simulate_one(p) for path in hierarchies])
    written = 0
    for stem, (transcripts, aggregate) in results:
        for index, transcript in enumerate(transcripts):
            _write_json(out_dir / "transcripts" / f"{stem}.trial{index}.json", transcript.to_json())
            written += 1
            if not transcript.complete:
                aborted += 1
        summary["artifacts"][stem] = aggregate.to_json()
    _write_json(out_dir / "simulate_summary.json", summary)
    print(f"wrote {written} transcript(s) in {out_dir / 'transcripts'}")
    if aborted:
        print(f"{aborted} conversation(s) aborted", file=sys.stderr)
        return 2
    return 0


# -- evaluate ---------------------------------------------------------------------


def _load_model_transcripts(model_dirs: dict[str, Path]) -> dict[str, dict[str, list[Transcript]]]:
    """model -> artifact -> transcripts ordered by trial index."""
    loaded: dict[str, dict[str, list[Transcript]]] = {}
    for model, directory in model_dirs.items():
        per_artifact: dict[str, list[tuple[int, Transcript]]] = {}
        for path in sorted(directory.glob("*.trial*.json")):
            stem, _sep, trial = path.stem.rpartition(".trial")
            transcript = Transcript.from_json(loads(path.read_text(encoding="utf-8")))
            per_artifact.setdefault(stem, []).append((int(trial), transcript))
        if not per_artifact:
            raise UsageError(f"no transcripts found in {directory}")
        loaded[model] = {
            stem: [t for _i, t in sorted(items)] for stem, items in per_artifact.items()
        }
    return loaded


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    pool = GatewayPool(config)
    judge_gateway = pool.gateway("judge")
    judge_model = config.roles["judge"].model or "judge"

    model_dirs: dict[str, Path] = {}
    for item in args.model:
        label, _sep, directory = item.partition("=")
        if not _sep:
            raise UsageError(f"--model needs label=dir, got {item!r}")
        model_dirs[label] = Path(directory)
    if len(model_dirs) < 2 and not args.unnormalized:
        raise UsageError("normalized discovery needs at least 2 --model entries (or --unnormalized)")

    loaded = _load_model_transcripts(model_dirs)
    models = sorted(loaded)
    artifact_sets = {m: set(loaded[m]) for m in models}
    reference = artifact_sets[models[0]]
    for model in models[1:]:
        if artifact_sets[model] != reference:
            diff = sorted(artifact_sets[model] ^ reference)
            raise UsageError(f"artifact coverage differs across models: {diff}")
    artifacts = sorted(reference)

    trial_counts = {
        len(loaded[m][a]) for m in models for a in artifacts
    }
    if len(trial_counts) != 1:
        raise UsageError(f"trial counts differ across models/artifacts: {sorted(trial_counts)}")
    n_trials = trial_counts.pop()

    forests = {}
    for artifact in artifacts:
        doc_path = Path(args.hierarchies) / f"{artifact}.json"
        if not doc_path.exists():
            raise UsageError(f"hierarchy document missing for artifact {artifact!r}: {doc_path}")
        forests[artifact] = parse_forest(doc_path.read_text(encoding="utf-8"))

    discovery_totals = {m: 0.0 for m in models}
    satisfaction_totals = {m: 0.0 for m in models}
    skip_counts = {"discovery": 0, "satisfaction": 0}
    notes: list[str] = []
    for trial in range(n_trials):
        entries = {
            (m, a): RunEntry(
                end_state=loaded[m][a][trial].end_state,
                final_artifact=loaded[m][a][trial].final_artifact,
                transcripts=[loaded[m][a][trial]],
            )
            for m in models
            for a in artifacts
        }
        runs = ModelRunSet(models=models, artifacts=artifacts, entries=entries, forests=forests)
        discovery = discovery_score(runs, unnormalized=args.unnormalized)
        skip_counts["discovery"] += len(discovery.skipped_artifacts)
        for model in models:
            discovery_totals[model] += discovery.per_model[model]
        if all(e.final_artifact is not None for e in entries.values()):
            satisfaction = satisfaction_score(runs, judge_gateway, judge_model=judge_model)
            skip_counts["satisfaction"] += len(satisfaction.skipped_artifacts)
            notes.extend(satisfaction.notes)
            for model in models:
                satisfaction_totals[model] += satisfaction.per_model[model]

    report: dict = {
        "schema": "report-v1",
        "config_digest": config.digest(),
        "mode": "unnormalized" if args.unnormalized else "normalized",
        "n_trials": n_trials,
        "skips": skip_counts,
        "notes": notes,
        "models": {},
    }
    for model in models:
        transcripts = [t for a in artifacts for t in loaded[model][a]]
        itr_warnings: list[str] = []
        itr_values = [
            interactivity_score(t, judge_gateway, judge_model=judge_model, warnings=itr_warnings)
            for t in transcripts
        ]
        labels_excluded = 0
        histogram = {category: 0 for category in TRIGRAM_CATEGORIES}
        for transcript in transcripts:
            labels = [
                l for l in classify_turns(transcript, judge_gateway, model=judge_model) if l != "Unknown"
            ]
            if len(labels) < 3:
                labels_excluded += 1
                continue
            for category, count in trigram_distribution(labels).items():
                histogram[category] += count
        report["models"][model] = {
            "discovery": discovery_totals[model] / n_trials,
            "satisfaction": satisfaction_totals[model] / n_trials,
            "interactivity": sum(itr_values) / len(itr_values) if itr_values else 0.0,
            "mean_tokens": mean_output_tokens(transcripts),
            "trigrams": histogram,
            "transcripts_excluded_from_trigrams": labels_excluded,
            "interactivity_warnings": itr_warnings,
        }

    out_dir = Path(config.out_dir)
    _write_json(out_dir / "report.json", report)
    print(_render_table(report))
    return 0


def _render_table(report: dict) -> str:
    headers = ["model", "discovery", "satisfaction", "interactivity", "mean_tokens"]
    rows = [
        [
            model,
            f"{data['discovery']:.4f}",
            f"{data['satisfaction']:.4f}",
            f"{data['interactivity']:.4f}",
            f"{data['mean_tokens']:.1f}",
        ]
        for model, data in sorted(report["models"].items())
    ]
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    lines.extend("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows)
    return "\n".join(lines)


# -- synthesize --------------------------------------------------------------------


def _synthesize_conversation(
    document: str,
    policies: list,
    sim_gateway,
    settings,
    artifact_id: str,
) -> tuple[Transcript, list[PreferencePair], int]:
    from .forest import forest_digest
    from .orchestrator import Turn

    forest = trial_forest(document, 0)
    transcript = Transcript(
        forest_ref=forest_digest(forest),
        artifact_id=artifact_id,
        policy="+".join(p.description for p in policies),
        seed=forest.rng_seed,
        max_turns=settings.max_turns,
        initial_state=forest.snapshot(),
        turns=[],
        end_state=forest.snapshot(),
    )
    pairs: list[PreferencePair] = []
    skipped_turns = 0
    history: list[tuple[str, str]] = [("user", forest.initial_request)]
    user_message = forest.initial_request

    for turn_index in range(1, settings.max_turns + 1):
        candidates: list[ChatResponse] = []
        for policy in policies:
            candidates.append(policy.respond(history, turn_index, forest))
        ranking = rank_candidates(forest, history, candidates, sim_gateway, settings)
        chosen = ranking.outcomes[ranking.chosen_index]
        if ranking.pair_emitted:
            rejected = ranking.outcomes[ranking.rejected_index]
            pairs.append(
                PreferencePair(
                    context=list(history),
                    chosen=chosen.response.text,
                    rejected=rejected.response.text,
                    chosen_reward=chosen.reward,
                    rejected_reward=rejected.reward,
                    chosen_source=policies[ranking.chosen_index].description,
                    rejected_source=policies[ranking.rejected_index].description,
                )
            )
        else:
            skipped_turns += 1
        forest.apply_delta(chosen.delta)
        history.append(("assistant", chosen.response.text))
        transcript.turns.append(
            Turn(turn_index, user_message, chosen.response, chosen.evaluation, chosen.delta, chosen.reward)
        )
        if turn_index < settings.max_turns:
            user_message = generate_user_message(
                forest,
                history,
                chosen.delta,
                sim_gateway,
                last_evaluation=chosen.evaluation,
                model=settings.user_model,
                temperature=settings.user_temperature,
            )
            history.append(("user", user_message))

    transcript.end_state = forest.snapshot()
    return transcript, pairs, skipped_turns


def cmd_synthesize(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    pool = GatewayPool(config)
    policies = [_make_policy(args.policy_a, pool, config), _make_policy(args.policy_b, pool, config)]
    if policies[0].description == policies[1].description:
        policies[1].description += "#2"
    sim_gateway = pool.gateway("evaluator")
    settings = config.simulation_settings()
    hierarchies = _collect_files(args.hierarchies, (".json",))
    out_dir = Path(config.out_dir)

    transcripts: list[Transcript] = []
    pairs: list[PreferencePair] = []
    skipped = 0
    for path in hierarchies:
        transcript, new_pairs, skipped_turns = _synthesize_conversation(
            path.read_text(encoding="utf-8"), policies, sim_gateway, settings, path.stem
        )
        transcripts.append(transcript)
        pairs.extend(new_pairs)
        skipped += skipped_turns

    sft_records = emit_sft(transcripts, include_final_artifact=config.sft_include_final_artifact)
    dpo_records, summary = emit_dpo(pairs, margin=config.dpo_margin)
    write_sft(sft_records, out_dir / "sft.jsonl")
    write_dpo(dpo_records, out_dir / "dpo.jsonl")
    payload = {
        "config_digest": config.digest(),
        "sft_records": len(sft_records),
        "skipped_turns": skipped,
        "dpo": summary.to_json(),
    }
    _write_json(out_dir / "synthesis_summary.json", payload)
    print(
        f"pairs={summary.pairs} dropped={summary.dropped} ties={summary.ties} "
        f"chosen={summary.chosen_mean:.3f}+-{summary.chosen_sd:.3f} "
        f"rejected={summary.rejected_mean:.3f}+-{summary.rejected_sd:.3f} "
        f"win_rates={summary.win_rates}"
    )
    return 0


# -- analyze -----------------------------------------------------------------------


def cmd_analyze(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    pool = GatewayPool(config)
    judge_gateway = pool.gateway("judge")
    judge_model = config.roles["judge"].model or "judge"

    model_dirs: dict[str, Path] = {}
    for item in args.transcripts:
        label, sep, directory = item.partition("=")
        if sep:
            model_dirs[label] = Path(directory)
        else:
            model_dirs[Path(item).name] = Path(item)

    report: dict = {"schema": "behavior-report-v1", "config_digest": config.digest(), "models": {}}
    for model, directory in sorted(model_dirs.items()):
        paths = sorted(directory.glob("*.json"))
        if not paths:
            raise UsageError(f"no transcripts found in {directory}")
        histogram = {category: 0 for category in TRIGRAM_CATEGORIES}
        excluded = 0
        unknown_turns = 0
        for path in paths:
            transcript = Transcript.from_json(loads(path.read_text(encoding="utf-8")))
            labels = classify_turns(transcript, judge_gateway, model=judge_model)
            unknown_turns += sum(1 for l in labels if l == "Unknown")
            labels = [l for l in labels if l != "Unknown"]
            if len(labels) < 3:
                excluded += 1
                continue
            for category, count in trigram_distribution(labels).items():
                histogram[category] += count
        report["models"][model] = {
            "trigrams": histogram,
            "transcripts_excluded": excluded,
            "unknown_turns": unknown_turns,
        }

    out_dir = Path(config.out_dir)
    _write_json(out_dir / "behavior_report.json", report)
    for model, data in sorted(report["models"].items()):
        print(f"{model}: {data['trigrams']} (excluded={data['transcripts_excluded']})")
    return 0


# -- entry point -------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="config file (YAML or JSON)")
    parser.add_argument("--mode", choices=("live", "record", "replay"), default=None)
    parser.add_argument("--cassette", default=None, help="cassette path for record/replay")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--jobs", type=int, default=None)
    parser.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="intentsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="build hierarchy documents from artifacts")
    p_build.add_argument("artifacts", nargs="+", help="artifact files or directories")
    p_build.add_argument("--artifact-type", default="text artifact")
    _add_common(p_build)
    p_build.set_defaults(func=cmd_build)

    p_sim = sub.add_parser("simulate", help="run simulated conversations against a policy")
    p_sim.add_argument("hierarchies", nargs="+", help="hierarchy documents or directories")
    p_sim.add_argument("--policy", required=True, help="null | oracle | scripted:FILE | gateway[:template]")
    p_sim.add_argument("--no-final-artifact", action="store_true")
    _add_common(p_sim)
    p_sim.set_defaults(func=cmd_simulate)

    p_eval = sub.add_parser("evaluate", help="compute metrics over transcript sets")
    p_eval.add_argument("--model", action="append", required=True, help="label=transcript-dir")
    p_eval.add_argument("--hierarchies", required=True, help="directory of hierarchy documents")
    p_eval.add_argument("--unnormalized", action="store_true")
    _add_common(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_syn = sub.add_parser("synthesize", help="generate SFT and preference datasets")
    p_syn.add_argument("hierarchies", nargs="+")
    p_syn.add_argument("--policy-a", required=True)
    p_syn.add_argument("--policy-b", required=True)
    _add_common(p_syn)
    p_syn.set_defaults(func=cmd_synthesize)

    p_ana = sub.add_parser("analyze", help="divergent/convergent trigram analysis")
    p_ana.add_argument("transcripts", nargs="+", help="transcript dirs (label=dir or dir)")
    _add_common(p_ana)
    p_ana.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (AuthenticationError, MetricsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except IntentSimError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
