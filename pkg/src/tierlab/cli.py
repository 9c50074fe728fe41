"""Operator surface: run configs, parameter sweeps, and report comparison.

Configuration is one self-contained JSON document; all sizes are in pages
(a "16GiB@4KiB" shorthand is accepted and normalized).  The seed is
mandatory -- there is no implicit entropy -- and TIERLAB_SEED overrides it
for CI fuzzing.  Re-running the same config byte-reproduces report.json
except for the generated_at field.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict

from .mem_model import PAGE_SIZE, CostModel, PLATFORM_PROFILES, Tier, TierSpec
from .sim_engine import (
    DEFAULT_SNAPSHOT_INTERVAL,
    SCHEMA_VERSION,
    SNAPSHOT_FIELDS,
    Simulation,
    build_simulation,
)
from .workload import ConfigError, Scenario, ScenarioKind, build_scenario, gb_to_pages

_SIZE_UNITS = {"kib": 1024, "mib": 1024 ** 2, "gib": 1024 ** 3}


def parse_pages(value) -> int:
    """Accept a raw page count or a '16GiB@4KiB' shorthand."""
    if isinstance(value, int):
        return value
    text = str(value).strip().lower()
    if "@" in text:
        size_part, page_part = text.split("@", 1)
        if page_part not in ("4kib", "4k"):
            raise ConfigError(f"page size must be 4KiB, got {page_part!r}")
    else:
        size_part = text
        if size_part.isdigit():
            return int(size_part)
    for unit, mult in _SIZE_UNITS.items():
        if size_part.endswith(unit):
            number = float(size_part[: -len(unit)])
            return int(round(number * mult / PAGE_SIZE))
    raise ConfigError(f"cannot parse size {value!r} (use pages or e.g. 16GiB@4KiB)")


class RunConfig:
    """Validated view over the JSON config document."""

    def __init__(self, doc: dict):
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        self.doc = doc
        seed = os.environ.get("TIERLAB_SEED")
        if seed is not None:
            self.seed = int(seed)
        elif "seed" in doc:
            self.seed = int(doc["seed"])
        else:
            raise ConfigError("missing required key: seed")
        self.scale = int(doc.get("scale", 1024))
        self.cores = int(doc.get("cores", 4))
        self.snapshot_interval = int(doc.get("snapshot_interval",
                                             DEFAULT_SNAPSHOT_INTERVAL))
        self.output_dir = doc.get("output_dir", ".")

        self.policy_kind, self.policy_params = self._parse_policy(doc.get("policy"))
        self.fast_spec, self.slow_spec, self.costs = self._parse_machine(doc)
        self.scenario = self._parse_scenario(doc.get("scenario"))

    def _parse_policy(self, section) -> tuple[str, dict]:
        if section is None:
            raise ConfigError("missing required key: policy")
        if isinstance(section, str):
            section = {"kind": section}
        kind = section.get("kind")
        if kind not in ("nomad", "tpp", "sampling", "none"):
            raise ConfigError(f"policy.kind must be nomad|tpp|sampling|none, got {kind!r}")
        params = {}
        for key in ("cooling_period", "sample_prob", "kpromote_budget", "seed"):
            if key in section:
                params[key] = section[key]
        unknown = set(section) - {"kind", "cooling_period", "sample_prob",
                                  "kpromote_budget", "seed"}
        if unknown:
            raise ConfigError(f"unknown policy key: {sorted(unknown)[0]}")
        return kind, params

    def _parse_machine(self, doc) -> tuple[TierSpec, TierSpec, CostModel]:
        costs_section = dict(doc.get("costs", {}))
        profile_name = costs_section.pop("profile", "platform_a")
        profile = PLATFORM_PROFILES.get(profile_name)
        if profile is None:
            raise ConfigError(f"costs.profile unknown: {profile_name!r} "
                              f"(choose from {sorted(PLATFORM_PROFILES)})")
        tiers = doc.get("tiers", {})
        fast_pages = parse_pages(tiers.get("fast_pages", gb_to_pages(16, self.scale)))
        slow_pages = parse_pages(tiers.get("slow_pages", gb_to_pages(16, self.scale)))
        unknown = set(tiers) - {"fast_pages", "slow_pages"}
        if unknown:
            raise ConfigError(f"unknown tiers key: {sorted(unknown)[0]}")
        fast, slow = profile.tier_specs(fast_pages, slow_pages)
        valid_costs = {"minor_fault_cost", "tlb_ipi_cost_per_core",
                       "page_copy_cost", "remap_cost", "queue_op_cost"}
        unknown = set(costs_section) - valid_costs
        if unknown:
            raise ConfigError(f"unknown costs key: {sorted(unknown)[0]}")
        try:
            costs = profile.cost_model(**costs_section)
        except ValueError as exc:
            raise ConfigError(f"costs: {exc}") from exc
        return fast, slow, costs

    def _parse_scenario(self, section) -> Scenario:
        if section is None:
            raise ConfigError("missing required key: scenario")
        if isinstance(section, str):
            section = {"kind": section}
        section = dict(section)
        kind = section.pop("kind", None)
        if kind in ("small", "medium", "large"):
            kwargs = {}
            if "read_fraction" in section:
                kwargs["read_fraction"] = float(section.pop("read_fraction"))
            if "duration" in section:
                kwargs["duration"] = int(section.pop("duration"))
            if section:
                raise ConfigError(f"unknown scenario key: {sorted(section)[0]}")
            return build_scenario(ScenarioKind(kind), self.scale, seed=self.seed,
                                  fast_capacity_pages=self.fast_spec.capacity_pages,
                                  **kwargs)
        if kind != "custom":
            raise ConfigError(f"scenario.kind must be small|medium|large|custom, "
                              f"got {kind!r}")
        return self._parse_custom_scenario(section)

    def _parse_custom_scenario(self, section) -> Scenario:
        try:
            rss = parse_pages(section.pop("rss_pages"))
            wss = parse_pages(section.pop("wss_pages"))
        except KeyError as exc:
            raise ConfigError(f"custom scenario missing key: {exc.args[0]}") from exc
        placement_doc = section.pop("placement", "auto")
        if placement_doc == "auto":
            # standard allocation policy: fast tier first, spill to slow
            fast_room = self.fast_spec.capacity_pages - int(
                section.get("pinned_fast_pages", 0))
            split = min(rss, fast_room)
            placement = []
            if split:
                placement.append((range(0, split), Tier.FAST))
            if rss - split:
                placement.append((range(split, rss), Tier.SLOW))
        else:
            placement = []
            for item in placement_doc:
                start, stop, tier = item
                placement.append((range(int(start), int(stop)),
                                  Tier.FAST if tier == "fast" else Tier.SLOW))
        known = {"read_fraction", "pattern", "zipf_skew", "block_pages",
                 "duration", "pinned_fast_pages", "arm_slow_pages", "name"}
        unknown = set(section) - known
        if unknown:
            raise ConfigError(f"unknown scenario key: {sorted(unknown)[0]}")
        block_pages = section.get("block_pages", 0)
        if block_pages == "wss":
            block_pages = wss
        return Scenario(
            name=section.get("name", "custom"),
            rss_pages=rss,
            wss_pages=wss,
            placement=placement,
            read_fraction=float(section.get("read_fraction", 0.5)),
            pattern=section.get("pattern", "zipf"),
            zipf_skew=float(section.get("zipf_skew", 0.99)),
            block_pages=int(block_pages),
            duration=int(section.get("duration", 100_000)),
            seed=self.seed,
            pinned_fast_pages=int(section.get("pinned_fast_pages", 0)),
            arm_slow_pages=bool(section.get("arm_slow_pages", True)),
        )

    def build(self) -> Simulation:
        return build_simulation(
            self.scenario, self.policy_kind,
            fast_spec=self.fast_spec, slow_spec=self.slow_spec, costs=self.costs,
            cores=self.cores, policy_params=self.policy_params,
            snapshot_interval=self.snapshot_interval)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return RunConfig(doc)


def report_payload(config: RunConfig, sim: Simulation, report) -> dict:
    payload = report.to_dict()
    payload["policy"] = config.policy_kind
    payload["scenario"] = {
        "name": sim.scenario.name,
        "rss_pages": sim.scenario.rss_pages,
        "wss_pages": sim.scenario.wss_pages,
        "read_fraction": sim.scenario.read_fraction,
        "pattern": sim.scenario.pattern,
        "duration": sim.scenario.duration,
    }
    payload["config"] = config.doc
    return payload


def write_outputs(payload: dict, sim: Simulation, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    stamped = dict(payload)
    stamped["generated_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8",
              newline="\n") as fh:
        json.dump(stamped, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "snapshots.csv"), "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["schema_version"] + SNAPSHOT_FIELDS)
        for snap in sim.snapshots:
            row = asdict(snap)
            writer.writerow([SCHEMA_VERSION] + [row[k] for k in SNAPSHOT_FIELDS])
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(format_summary(payload))


def format_summary(payload: dict) -> str:
    t, s = payload["transient"], payload["stable"]
    lines = [
        f"tierlab run: scenario={payload['scenario']['name']} "
        f"policy={payload['policy']} seed={payload['seed']}",
        f"end_cycle={payload['end_cycle']} "
        f"transient_end={payload['transient_end_cycle']} "
        f"stable_detected={payload['stable_detected']} "
        f"oom={payload['oom_terminated']}",
        "",
        f"{'phase':<12}{'cycles':>14}{'accesses':>12}{'proxy B/cyc':>14}"
        f"{'promo':>10}{'demo':>10}{'commit':>10}{'abort':>8}",
    ]
    for name, ph in (("transient", t), ("stable", s)):
        lines.append(
            f"{name:<12}{ph['cycles']:>14}{ph['access_count']:>12}"
            f"{ph['throughput_proxy']:>14.5f}"
            f"{ph['promotions_read'] + ph['promotions_write']:>10}"
            f"{ph['demotions_remap'] + ph['demotions_copy']:>10}"
            f"{ph['tpm_committed']:>10}{ph['tpm_aborted']:>8}")
    totals = payload["totals"]
    lines += [
        "",
        f"migration success ratio: {payload['success_ratio'] or 'undefined'}",
        f"minor_faults={totals['minor_faults']} shadow_faults={totals['shadow_faults']}",
        f"demotions: remap={totals['demotions_remap']} copy={totals['demotions_copy']}",
        f"shadow_pages_end={totals['shadow_pages_end']} "
        f"fast_free_end={totals['fast_free_end']}",
        "",
    ]
    return "\n".join(lines)


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out_dir = args.out or config.output_dir
    try:
        sim = config.build()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    report = sim.run()
    payload = report_payload(config, sim, report)
    write_outputs(payload, sim, out_dir)
    if not args.quiet:
        print(format_summary(payload), end="")
    if payload["oom_terminated"]:
        print("run terminated by OutOfMemory; partial report written",
              file=sys.stderr)
        return 2
    return 0


def _set_axis(doc: dict, axis: str, value: float) -> None:
    parts = axis.split(".")
    node = doc
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = node.get(part) if isinstance(node.get(part), dict) else {}
        node = node[part]
    leaf = parts[-1]
    node[leaf] = int(value) if float(value).is_integer() else float(value)


SWEEP_COLUMNS = [
    "axis", "value", "status", "end_cycle", "transient_end_cycle",
    "transient_throughput", "stable_throughput",
    "promotions", "demotions", "demotions_remap", "demotions_copy",
    "tpm_committed", "tpm_aborted", "shadow_pages_end", "oom_terminated",
]


def cmd_sweep(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            base_doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    values = [float(v) for v in args.values.split(",")]
    rows = []
    failures = 0
    for value in values:
        doc = json.loads(json.dumps(base_doc))
        _set_axis(doc, args.axis, value)
        row = {"axis": args.axis, "value": value, "status": "ok"}
        try:
            config = RunConfig(doc)
            sim = config.build()
            report = sim.run()
            payload = report_payload(config, sim, report)
            row.update({
                "end_cycle": payload["end_cycle"],
                "transient_end_cycle": payload["transient_end_cycle"],
                "transient_throughput": payload["transient"]["throughput_proxy"],
                "stable_throughput": payload["stable"]["throughput_proxy"],
                "promotions": payload["totals"]["promotions_read"]
                              + payload["totals"]["promotions_write"],
                "demotions": payload["totals"]["demotions_remap"]
                             + payload["totals"]["demotions_copy"],
                "demotions_remap": payload["totals"]["demotions_remap"],
                "demotions_copy": payload["totals"]["demotions_copy"],
                "tpm_committed": payload["totals"]["tpm_committed"],
                "tpm_aborted": payload["totals"]["tpm_aborted"],
                "shadow_pages_end": payload["totals"]["shadow_pages_end"],
                "oom_terminated": payload["oom_terminated"],
            })
            if payload["oom_terminated"]:
                row["status"] = "oom"
        except Exception as exc:  # noqa: BLE001 - row-level isolation
            row["status"] = f"error: {exc}"
            failures += 1
        rows.append(row)
    out_path = args.out or "sweep.csv"
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n",
                                restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    print(f"wrote {out_path} ({len(rows)} rows, {failures} failed)")
    return 0 if failures == 0 else 1


REPORT_COLUMNS = [
    "file", "scenario", "policy", "seed",
    "transient_throughput", "stable_throughput",
    "promotions_read", "promotions_write",
    "demotions_remap", "demotions_copy",
    "tpm_committed", "tpm_aborted", "success_ratio",
]


def cmd_report(args) -> int:
    if not args.reports:
        print("usage error: at least one report.json required", file=sys.stderr)
        return 1
    rows = []
    for path in args.reports:
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"cannot read {path}: {exc}", file=sys.stderr)
            return 1
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            print(f"schema version mismatch in {path}: "
                  f"found {version}, expected {SCHEMA_VERSION}", file=sys.stderr)
            return 1
        rows.append({
            "file": os.path.basename(os.path.dirname(path) or path),
            "scenario": payload["scenario"]["name"],
            "policy": payload["policy"],
            "seed": payload["seed"],
            "transient_throughput": round(payload["transient"]["throughput_proxy"], 5),
            "stable_throughput": round(payload["stable"]["throughput_proxy"], 5),
            "promotions_read": payload["totals"]["promotions_read"],
            "promotions_write": payload["totals"]["promotions_write"],
            "demotions_remap": payload["totals"]["demotions_remap"],
            "demotions_copy": payload["totals"]["demotions_copy"],
            "tpm_committed": payload["totals"]["tpm_committed"],
            "tpm_aborted": payload["totals"]["tpm_aborted"],
            "success_ratio": payload["success_ratio"] or "undefined",
        })
    widths = {col: max(len(col), *(len(str(r[col])) for r in rows))
              for col in REPORT_COLUMNS}
    header = "  ".join(col.ljust(widths[col]) for col in REPORT_COLUMNS)
    print(header)
    print("-" * len(header))
    for row in rows:
        print("  ".join(str(row[col]).ljust(widths[col]) for col in REPORT_COLUMNS))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tierlab",
        description="Deterministic two-tier memory migration simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one simulation")
    p_run.add_argument("config", help="path to JSON run config")
    p_run.add_argument("--out", help="output directory (default: config output_dir)")
    p_run.add_argument("--quiet", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run one simulation per axis value")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True,
                         help="dotted config path, e.g. costs.page_copy_cost")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--out", help="sweep.csv path")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="compare runs")
    p_report.add_argument("reports", nargs="*", help="report.json files")
    p_report.add_argument("--csv", help="also write the table as CSV")
    p_report.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
