import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from services.benchmarks import BenchReport
from services.log_persistence import RunManifest

logger = logging.getLogger(__name__)


class ReportRenderer:
    """Trasforma report di benchmark e manifest dei job in testo e file"""

    def __init__(self, output_dir: Optional[Union[str, Path]] = None):
        self.output_dir = Path(output_dir) if output_dir is not None else None

    def bench_summary(self, report: BenchReport) -> str:
        lines = [f"benchmark: {report.benchmark}", f"seed: {report.seed}"]
        for key, value in sorted(report.environment.items()):
            lines.append(f"env.{key}: {value}")
        if report.refused:
            lines.append(f"REFUSED: {report.refused}")
            return "\n".join(lines) + "\n"

        lines.append(f"cells: {len(report.cells)}")
        flagged = [c for c in report.cells if c.flagged]
        lines.append(f"flagged: {len(flagged)}")
        errors = [c.pct_err for c in report.cells if c.pct_err is not None]
        if errors:
            lines.append(f"max pct_err: {max(errors):.3f}")
        for key, value in sorted(report.summary.items()):
            lines.append(f"{key}: {value:.6g}" if isinstance(value, float) else f"{key}: {value}")
        for cell in flagged:
            params = " ".join(f"{k}={v}" for k, v in cell.params.items())
            lines.append(f"  flagged {params} observed={cell.observed:.6g}")
        return "\n".join(lines) + "\n"

    def write_bench(self, report: BenchReport, stem: Optional[str] = None) -> List[Path]:
        """Scrive CSV, JSON (config e seed inclusi) e riepilogo testuale"""
        if self.output_dir is None:
            raise ValueError("no output directory configured")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"bench-{report.benchmark}"
        paths = [
            self.output_dir / f"{stem}.csv",
            self.output_dir / f"{stem}.json",
            self.output_dir / f"{stem}.txt"
        ]
        paths[0].write_text(report.to_csv(), encoding="utf-8")
        paths[1].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        paths[2].write_text(self.bench_summary(report), encoding="utf-8")
        logger.info("Report %s scritto in %s", report.benchmark, self.output_dir)
        return paths

    @staticmethod
    def load_bench(path: Union[str, Path]) -> BenchReport:
        return BenchReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def job_summary(self, status: Dict[str, Any], manifest: Optional[RunManifest] = None) -> str:
        lines = [
            f"job: {status.get('job_id')}",
            f"state: {status.get('state')}"
        ]
        history = status.get("history") or []
        if history:
            start = history[0][1]
            lines.append("history: " + " -> ".join(f"{s}(+{at - start:.2f}s)" for s, at in history))
        if status.get("error"):
            lines.append(f"error: {status['error']}")
        if status.get("log_dir"):
            lines.append(f"logs: {status['log_dir']}")
        if manifest is not None:
            lines.append(f"routers: {len(manifest.vid_owner)}")
            lines.append(f"agents: {', '.join(manifest.agents)}")
            lines.append(f"log files: {len(manifest.log_files)}")
            if manifest.missing_agents:
                lines.append(f"missing agents: {', '.join(manifest.missing_agents)}")
            if manifest.migrations:
                lines.append(f"migrations: {len(manifest.migrations)}")
            for vid, app in sorted(manifest.apps.items()):
                lines.append(f"  app {vid}: {json.dumps(app, sort_keys=True)}")
        return "\n".join(lines) + "\n"
