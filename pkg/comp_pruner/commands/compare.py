import argparse
import asyncio
from collections import OrderedDict
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ..config import settings, Strategy
from ..models import PruneReport
from ..strategies import run_strategy
from ..utils import get_logger, CompError
from ..workbench import TransformerModel, load_checkpoint, read_corpus
from .base_command import BaseCommand, EXIT_OK, add_corpus_argument, add_prune_arguments, prune_config_from_args
from .prune import resolve_removed_layers
from .reporting import build_manifest, utc_now, write_csv, write_json, write_timings

logger = get_logger(__name__)

COMPARE_HEADER = [
    "row", "strategy", "ratio", "seed", "perplexity", "kl", "logit_mse",
    "achieved_ratio", "shortfall", "exit_code", "error",
]
DEFAULT_STRATEGIES = [Strategy.COMP.value, Strategy.LAYER.value, Strategy.NEURON.value]

Cell = Tuple[str, float, int]


def data_row(cell: Cell, report: Optional[PruneReport], error: Optional[CompError] = None) -> Dict[str, Any]:
    strategy, ratio, seed = cell
    row = {"row": "data", "strategy": strategy, "ratio": ratio, "seed": seed}
    if error is not None:
        row.update(exit_code=error.exit_code, error=str(error))
        return row
    row.update(
        perplexity=report.after.perplexity,
        kl=report.after.kl,
        logit_mse=report.after.logit_mse,
        achieved_ratio=report.achieved_ratio,
        shortfall=report.shortfall,
        exit_code=0,
        error="",
    )
    return row


def summary_rows(rows: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
    groups: "OrderedDict[Tuple[str, float], List[Dict[str, Any]]]" = OrderedDict()
    for row in rows:
        groups.setdefault((row["strategy"], row["ratio"]), []).append(row)
    summaries = []
    for (strategy, ratio), members in groups.items():
        ok = [r for r in members if r.get("exit_code") == 0]
        summary = {"row": "summary", "strategy": strategy, "ratio": ratio, "seed": "mean"}
        if ok:
            for key in ("perplexity", "kl", "logit_mse", "achieved_ratio"):
                summary[key] = float(np.mean([r[key] for r in ok]))
            summary["shortfall"] = any(r["shortfall"] for r in ok)
        summary["exit_code"] = 0 if len(ok) == len(members) else max(r["exit_code"] for r in members)
        summary["error"] = "" if ok else "no successful cell"
        summaries.append(summary)
    return summaries


class CompareCommand(BaseCommand):
    name = "compare"
    help = "grid of strategies x ratios x seeds as plot-ready long-form CSV"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("--model", required=True, help="checkpoint directory")
        add_corpus_argument(parser)
        parser.add_argument("--ratios", type=float, nargs="+", default=[0.1, 0.2, 0.3])
        parser.add_argument("--strategies", nargs="+", choices=[s.value for s in Strategy], default=DEFAULT_STRATEGIES)
        parser.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
        parser.add_argument("--jobs", type=int, default=settings.jobs)
        add_prune_arguments(parser)
        parser.add_argument("--out", required=True, help="CSV path")
        parser.add_argument("--report", default=None, help="JSON with every cell report")

    def run(self, args: argparse.Namespace) -> int:
        started = utc_now()
        model = load_checkpoint(args.model)
        corpus = read_corpus(args.corpus)
        cells = [
            (strategy, ratio, args.seed + k)
            for strategy in args.strategies
            for ratio in args.ratios
            for k in range(args.seeds)
        ]
        results = asyncio.run(self._run_cells(model, corpus, args, cells))

        rows = [data_row(cell, report, error) for cell, (report, error) in zip(cells, results)]
        write_csv(args.out, COMPARE_HEADER, rows + summary_rows(rows))

        if args.report:
            config = {
                "ratios": args.ratios,
                "strategies": args.strategies,
                "seeds": args.seeds,
                "base": prune_config_from_args(args, ratio=args.ratios[0]).model_dump(mode="json"),
            }
            cell_reports = [
                {"strategy": s, "ratio": r, "seed": seed, "report": rep.model_dump(mode="json") if rep else None}
                for (s, r, seed), (rep, _) in zip(cells, results)
            ]
            manifest = build_manifest(self.name, config, {"model": args.model, "corpus": args.corpus}, args.seed)
            write_json(args.report, {"manifest": manifest.model_dump(mode="json"), "cells": cell_reports})
            phases: Dict[str, float] = {}
            for report, _ in results:
                for name, seconds in (report.phase_seconds if report else {}).items():
                    phases[name] = phases.get(name, 0.0) + seconds
            write_timings(args.report, started, phases)

        failed = sum(1 for _, error in results if error is not None)
        print(f"cells={len(cells)} failed={failed}")
        return EXIT_OK

    async def _run_cells(self, model: TransformerModel, corpus: bytes, args: argparse.Namespace,
                         cells: List[Cell]) -> List[Tuple[Optional[PruneReport], Optional[CompError]]]:
        semaphore = asyncio.Semaphore(max(1, args.jobs))

        async def one(cell: Cell):
            async with semaphore:
                return await asyncio.to_thread(self._run_cell, model, corpus, args, cell)

        return list(await asyncio.gather(*(one(cell) for cell in cells)))

    def _run_cell(self, model: TransformerModel, corpus: bytes, args: argparse.Namespace,
                  cell: Cell) -> Tuple[Optional[PruneReport], Optional[CompError]]:
        strategy, ratio, seed = cell
        try:
            cfg = prune_config_from_args(
                args, ratio=ratio, seed=seed,
                removed_layers=resolve_removed_layers(args, model, ratio),
            )
            _, report = run_strategy(Strategy(strategy), model, corpus, cfg)
            logger.info("Compare cell finished", strategy=strategy, ratio=ratio, seed=seed,
                        perplexity=report.after.perplexity)
            return report, None
        except CompError as e:
            logger.warning("Compare cell failed", strategy=strategy, ratio=ratio, seed=seed,
                           error=str(e), exit_code=e.exit_code)
            return None, e
