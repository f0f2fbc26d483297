"""Operator commands: run episodes, sweeps, and build concatenated benchmarks.

A run is configured by a single JSON document with a "version" field;
unknown keys are rejected so a typo cannot silently change an experiment.
All randomness flows from the config seed, so (config, seed) fully
determines oracle outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .bench import (
    build_needle,
    make_concat,
    run_needle,
    source_from_spec,
    sweep_depth,
    sweep_duration,
    sweep_workers,
)
from .media import MediaError, serialize_srt
from .metrics import captioner_tokens, write_scaling_csv
from .orchestrator import Episode, EpisodeConfig
from .policy import OracleKnowledge, OraclePolicy, RemotePolicy
from .render import save_png
from .timeline import sub_second_depth

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MEDIA = 3


class ConfigError(ValueError):
    pass


EPISODE_KEYS = {
    "k", "tile_px", "max_depth", "workers", "top_n", "dfs_budget",
    "bfs_budget", "max_rounds", "token_budget", "blackout_theta",
    "traversal", "expand_floor_s", "evidence_pad_s", "virtual_loss",
    "block_tokens",
}
POLICY_KEYS = {"backend", "endpoint", "api_key", "model", "max_tokens", "timeout_s"}
VIDEO_KEYS = {"type", "duration_s", "seed", "fps", "events", "cues", "path",
              "srt", "decoder", "parts"}
TOP_KEYS = {"version", "seed", "episode", "policy", "video", "query",
            "candidates", "answer_index", "output_dir"}


def _check_keys(mapping: dict, allowed: set[str], where: str) -> None:
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r} in {where}")


def _check_video_spec(spec: dict, where: str = "video") -> None:
    _check_keys(spec, VIDEO_KEYS, where)
    for i, part in enumerate(spec.get("parts", []) or []):
        _check_video_spec(part, f"{where}.parts[{i}]")


def load_run_config(path: str) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("version") != 1:
        raise ConfigError(f"unsupported config version {cfg.get('version')!r}")
    _check_keys(cfg, TOP_KEYS, "top level")
    _check_keys(cfg.get("episode", {}), EPISODE_KEYS, "episode")
    _check_keys(cfg.get("policy", {}), POLICY_KEYS, "policy")
    if "video" not in cfg:
        raise ConfigError("config needs a 'video' section")
    _check_video_spec(cfg["video"])
    return cfg


def episode_config(cfg: dict) -> EpisodeConfig:
    return EpisodeConfig(**cfg.get("episode", {}))


def build_policy(cfg: dict, video_spec: dict):
    policy_cfg = dict(cfg.get("policy", {}))
    backend = policy_cfg.pop("backend", "oracle")
    if backend == "oracle":
        if video_spec.get("type") != "synthetic" and video_spec.get("type") != "concat":
            raise ConfigError("oracle backend needs a synthetic or concat video")
        events = _collect_events(video_spec)
        answer = cfg.get("answer_index")
        return OraclePolicy(OracleKnowledge(
            events=tuple(events), answer_index=answer if answer is not None else 0))
    if backend == "remote":
        endpoint = policy_cfg.pop("endpoint", None) or os.environ.get("ATLAS_ENDPOINT")
        api_key = policy_cfg.pop("api_key", None) or os.environ.get("ATLAS_API_KEY", "")
        if not endpoint:
            raise ConfigError("remote backend needs policy.endpoint or ATLAS_ENDPOINT")
        return RemotePolicy(endpoint=endpoint, api_key=api_key, **policy_cfg)
    raise ConfigError(f"unknown policy backend {backend!r}")


def _collect_events(video_spec: dict, offset: float = 0.0) -> list:
    from .media import SyntheticEvent

    events = []
    if video_spec.get("type") == "synthetic":
        for e in video_spec.get("events", []):
            events.append(SyntheticEvent(
                t_s=float(e["t"]) + offset, glyph=e["glyph"],
                width_s=float(e.get("width_s", 1.0))))
    elif video_spec.get("type") == "concat":
        cursor = 0.0
        for part in video_spec["parts"]:
            events.extend(_collect_events(part, cursor))
            cursor += float(part["duration_s"])
    return events


# ---------------------------------------------------------------------------
# Commands

def cmd_run(args) -> int:
    try:
        cfg = load_run_config(args.config)
        if args.query:
            cfg["query"] = args.query
        if args.candidates:
            cfg["candidates"] = list(args.candidates)
        if args.output_dir:
            cfg["output_dir"] = args.output_dir
        config = episode_config(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TypeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        source, cues = source_from_spec(cfg["video"])
    except (MediaError, FileNotFoundError) as exc:
        print(f"media error: {exc}", file=sys.stderr)
        return EXIT_MEDIA
    try:
        policy = build_policy(cfg, cfg["video"])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(cfg.get("output_dir", "."))
    outdir.mkdir(parents=True, exist_ok=True)
    episode = Episode(
        source, cfg.get("query", ""), cfg.get("candidates", []), config, policy,
        cues=cues, answer_index=cfg.get("answer_index"),
        trace_path=outdir / "trace.jsonl")
    result = episode.run()
    report = result.report()
    validate_report(report)
    with open(outdir / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    save_png(episode.masked_root_grid(), outdir / "masked_root.png")
    scratch = episode.scratchpad_grid()
    if scratch is not None:
        save_png(scratch, outdir / "scratchpad.png")
    print(f"answer={result.answer} correct={result.correct} "
          f"rounds={result.rounds} stop={result.stop_reason} "
          f"tokens={result.total_tokens} hit_rate={result.cache_hit_rate:.3f}")
    return EXIT_OK


def validate_report(report: dict) -> None:
    import jsonschema

    schema = json.loads(
        (resources.files("vidatlas") / "report_schema.json").read_text())
    jsonschema.validate(report, schema)


def _parse_num_list(text: str, cast=float) -> list:
    return [cast(tok) for tok in text.split(",") if tok.strip() != ""]


def cmd_sweep_duration(args) -> int:
    durations = _parse_num_list(args.durations)
    if args.trials <= 0:
        print("sweep refused: --trials must be positive", file=sys.stderr)
        return EXIT_CONFIG
    if len(set(durations)) < 4:
        print("fit refused: need at least 4 distinct durations", file=sys.stderr)
        return EXIT_CONFIG
    config = EpisodeConfig(tile_px=args.tile_px)
    points, fit = sweep_duration(durations, args.trials, config, seed=args.seed)
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_scaling_csv(points, outdir / "scaling.csv")
    by_dur = {}
    for p in points:
        by_dur.setdefault(p.duration_s, []).append(p)
    print(f"{'duration_s':>12} {'mean_total':>12} {'mean_effective':>15} {'hit_rate':>9}")
    for d in sorted(by_dur):
        ps = by_dur[d]
        print(f"{d:>12.0f} {sum(p.total_tokens for p in ps)/len(ps):>12.0f} "
              f"{sum(p.effective_tokens for p in ps)/len(ps):>15.0f} "
              f"{sum(p.hit_rate for p in ps)/len(ps):>9.3f}")
    longest = max(by_dur)
    mean_eff = sum(p.effective_tokens for p in by_dur[longest]) / len(by_dur[longest])
    summary = {
        "r2_log": fit.r2_log,
        "r2_linear": fit.r2_linear,
        "captioner_tokens_at_longest": captioner_tokens(longest),
        "effective_tokens_at_longest": mean_eff,
        "captioner_ratio": captioner_tokens(longest) / max(mean_eff, 1.0),
    }
    with open(outdir / "fit_summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"r2_log={fit.r2_log:.4f} r2_linear={fit.r2_linear:.4f} "
          f"captioner_ratio={summary['captioner_ratio']:.1f}x")
    return EXIT_OK


def cmd_sweep_workers(args) -> int:
    counts = _parse_num_list(args.workers, int)
    rows = sweep_workers(counts, duration_s=args.duration, n_events=args.events,
                         seed=args.seed,
                         config=EpisodeConfig(tile_px=args.tile_px))
    print(f"{'workers':>8} {'rounds':>7} {'total_steps':>12} "
          f"{'critical_path':>14} {'correct':>8}")
    base_evidence = rows[0].evidence if rows else set()
    all_equal = True
    for row in rows:
        print(f"{row.workers:>8} {row.rounds:>7} {row.total_steps:>12} "
              f"{row.critical_path_steps:>14} {str(row.correct):>8}")
        if row.evidence != base_evidence:
            all_equal = False
    print(f"evidence sets identical across worker counts: {all_equal}")
    return EXIT_OK


def cmd_sweep_depth(args) -> int:
    caps = _parse_num_list(args.max_depths, int)
    rows = sweep_depth(caps, duration_s=args.duration,
                       event_width_s=args.event_width, trials=args.trials,
                       seed=args.seed, config=EpisodeConfig(tile_px=args.tile_px))
    auto = sub_second_depth(args.duration, 8)
    print(f"sub-second layer for T={args.duration:.0f}s is depth {auto}")
    print(f"{'max_depth':>10} {'accuracy':>9} {'mean_tokens':>12} {'mean_evidence':>14}")
    for row in rows:
        print(f"{row.max_depth:>10} {row.accuracy:>9.2f} "
              f"{row.mean_total_tokens:>12.0f} {row.mean_evidence:>14.2f}")
    return EXIT_OK


def cmd_make_10h(args) -> int:
    inputs = []
    for path in args.inputs:
        try:
            with open(path) as f:
                spec = json.load(f)
        except OSError as exc:
            print(f"media error: {exc}", file=sys.stderr)
            return EXIT_MEDIA
        try:
            _check_video_spec(spec, path)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        inputs.append(spec)
    if not 0 <= args.target_index < len(inputs):
        print(f"config error: target index {args.target_index} out of range",
              file=sys.stderr)
        return EXIT_CONFIG
    concat_spec, cues, key = make_concat(inputs, args.target_index, seed=args.seed)
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "concat.json", "w") as f:
        json.dump(concat_spec, f, indent=2)
        f.write("\n")
    with open(outdir / "merged.srt", "w") as f:
        f.write(serialize_srt(cues))
    with open(outdir / "answer_key.json", "w") as f:
        json.dump(key, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"total_s={key['total_s']:.1f} target_slot={key['target_slot']} "
          f"target_offset_s={key['offset_s']:.1f} cues={len(cues)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidatlas",
        description="Hierarchical-grid video exploration engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one episode from a config file")
    p.add_argument("--config", required=True, help="path to run config JSON")
    p.add_argument("--query", help="override the config query")
    p.add_argument("--candidates", nargs="*", help="override answer candidates")
    p.add_argument("--output-dir", help="override the output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-duration", help="token scaling vs video duration")
    p.add_argument("--durations", default="60,600,3600,36000")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--tile-px", type=int, default=320)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default="sweep_duration_out")
    p.set_defaults(func=cmd_sweep_duration)

    p = sub.add_parser("sweep-workers", help="parallelism scaling experiment")
    p.add_argument("--workers", default="1,3,5,7")
    p.add_argument("--duration", type=float, default=3600.0)
    p.add_argument("--events", type=int, default=3)
    p.add_argument("--tile-px", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep_workers)

    p = sub.add_parser("sweep-depth", help="accuracy/tokens vs depth cap")
    p.add_argument("--max-depths", default="0,1,2,3")
    p.add_argument("--duration", type=float, default=36000.0)
    p.add_argument("--event-width", type=float, default=0.2)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--tile-px", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep_depth)

    p = sub.add_parser("make-10h", help="concatenate inputs with a hidden target")
    p.add_argument("--inputs", nargs="+", required=True,
                   help="video spec JSON files")
    p.add_argument("--target-index", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output-dir", default="concat_out")
    p.set_defaults(func=cmd_make_10h)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
