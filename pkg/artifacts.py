"""
Report and artifact files.

CSV reports start with `#` provenance lines (tool, version, seed, config
digest); extra header entries such as the bootstrap's p_hat/zeta_hat/m use the
same `# key: value` form so `read_report` returns them alongside the table.
Decision rules are JSON; pseudo-correctors are flat `key = value` text with
matrices written row-major as `rows,cols:v v v`.
"""
import hashlib
import logging
import os
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from calibration import CalibrationModel, DeltaWeights
from config import OUTPUT_DIR, TOOL_NAME, TOOL_VERSION
from dwols import DecisionRule, DtrFit
from errors import ConfigError, DataError, IngestionError
from mnboot import BootstrapReport
from recommend import PseudoCorrector
from schemas import DecisionRuleArtifact
from tabledesign import ProxyGroup

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


def config_digest(config: Optional[BaseModel]) -> str:
    """Short sha256 of the canonical JSON form of a config tree"""
    if config is None:
        return "none"
    text = config.model_dump_json(exclude_none=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _format_matrix(values) -> str:
    a = np.atleast_2d(np.asarray(values, dtype=float))
    return f"{a.shape[0]},{a.shape[1]}:" + " ".join(repr(float(v)) for v in a.ravel())


def _parse_matrix(text: str, key: str) -> np.ndarray:
    try:
        dims, _, body = text.partition(":")
        rows, cols = (int(v) for v in dims.split(","))
        values = [float(v) for v in body.split()]
    except ValueError:
        raise ConfigError(f"corrector entry '{key}' is not a rows,cols:values matrix", module="artifacts") from None
    if len(values) != rows * cols:
        raise ConfigError(
            f"corrector entry '{key}' declares {rows}x{cols} but holds {len(values)} values", module="artifacts"
        )
    return np.array(values, dtype=float).reshape(rows, cols)


class ArtifactManager:
    def __init__(self, output_dir: str = OUTPUT_DIR):
        self.output_dir = output_dir

    def resolve(self, path: str) -> str:
        """Relative paths land in the output directory, which is created on demand"""
        full = path if os.path.isabs(path) else os.path.join(self.output_dir, path)
        parent = os.path.dirname(full)
        if parent:
            os.makedirs(parent, exist_ok=True)
        return full

    def provenance(self, seed: int, config: Optional[BaseModel] = None, extra: Optional[Mapping] = None) -> List[str]:
        lines = [
            f"# tool: {TOOL_NAME}",
            f"# version: {TOOL_VERSION}",
            f"# seed: {seed}",
            f"# config: {config_digest(config)}",
        ]
        for key, value in (extra or {}).items():
            lines.append(f"# {key}: {value}")
        return lines

    def write_csv(self, path: str, frame: pd.DataFrame, header: Sequence[str]) -> str:
        full = self.resolve(path)
        with open(full, "w", encoding="utf-8", newline="") as fh:
            for line in header:
                fh.write(line + "\n")
            frame.to_csv(fh, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        logger.info("Wrote %s (%d rows)", full, len(frame))
        return full

    def read_report(self, path: str) -> Tuple[Dict[str, str], pd.DataFrame]:
        """Header entries and table of a CSV report"""
        header: Dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.startswith("#"):
                    break
                key, _, value = line[1:].partition(":")
                header[key.strip()] = value.strip()
        return header, pd.read_csv(path, comment="#")

    # Reports

    def write_coefficients(self, fit: DtrFit, path: str, seed: int, config: Optional[BaseModel] = None) -> str:
        frame = pd.DataFrame(fit.coefficient_rows(), columns=["stage", "model", "term", "estimate"])
        return self.write_csv(path, frame, self.provenance(seed, config, {"formulation": fit.formulation}))

    def write_bootstrap(
        self, report: BootstrapReport, path: str, seed: int, config: Optional[BaseModel] = None
    ) -> str:
        extra = {
            "p_hat": f"{report.p_hat:.10g}",
            "zeta_hat": f"{report.zeta_hat:.10g}",
            "m": report.m,
            "n": report.n,
            "level": f"{report.level:g}",
            "failures": report.failures,
        }
        frame = pd.DataFrame({
            "parameter": list(report.labels),
            "estimate": report.estimates,
            "lo": report.intervals[:, 0],
            "hi": report.intervals[:, 1],
        })
        return self.write_csv(path, frame, self.provenance(seed, config, extra))

    def write_summary(self, frame: pd.DataFrame, path: str, seed: int, config: Optional[BaseModel] = None,
                      extra: Optional[Mapping] = None) -> str:
        return self.write_csv(path, frame, self.provenance(seed, config, extra))

    # Decision rules

    def write_rule(self, rule: DecisionRule, path: str, formulation: str = "regret") -> str:
        artifact = DecisionRuleArtifact(
            tool=TOOL_NAME, version=TOOL_VERSION, formulation=formulation, **rule.to_dict()
        )
        full = self.resolve(path)
        with open(full, "w", encoding="utf-8") as fh:
            fh.write(artifact.model_dump_json(indent=2))
        logger.info("Wrote decision rule %s", full)
        return full

    def read_rule(self, path: str) -> DecisionRule:
        try:
            with open(path, encoding="utf-8") as fh:
                artifact = DecisionRuleArtifact.model_validate_json(fh.read())
        except OSError as e:
            raise IngestionError(f"cannot read decision rule {path}: {e.strerror}") from None
        except ValidationError as e:
            raise ConfigError(f"invalid decision rule {path}: {e.errors()[0]['msg']}", module="artifacts") from None
        return DecisionRule.from_dict(artifact.model_dump())

    # Pseudo-correctors

    def write_corrector(self, corrector: PseudoCorrector, path: str) -> str:
        lines = [f"tool = {TOOL_NAME}", f"version = {TOOL_VERSION}", f"groups = {len(corrector.groups)}"]
        for i, g in enumerate(corrector.groups):
            model = corrector.models[g.name]
            prefix = f"group.{i}"
            lines += [
                f"{prefix}.covariates = {','.join(g.covariates)}",
                f"{prefix}.proxies = {';'.join(','.join(p) for p in g.proxies)}",
                f"{prefix}.z_columns = {','.join(g.z_columns)}",
                f"{prefix}.available = {','.join(str(j) for j in corrector.proxies_used(g))}",
                f"{prefix}.delta_scheme = {model.delta.scheme}",
                f"{prefix}.delta = {_format_matrix(model.delta.delta)}",
                f"{prefix}.mu_x = {_format_matrix(model.mu_x)}",
                f"{prefix}.sigma_xx_1 = {_format_matrix(model.sigma_xx_1)}",
                f"{prefix}.sigma_xx_2 = {_format_matrix(model.sigma_xx_2)}",
                f"{prefix}.m_total = {_format_matrix(model.m_total)}",
            ]
            for j, m in enumerate(model.m_per_proxy):
                lines.append(f"{prefix}.m.{j} = {_format_matrix(m)}")
            if model.q:
                lines += [
                    f"{prefix}.mu_z = {_format_matrix(model.mu_z)}",
                    f"{prefix}.sigma_xz = {_format_matrix(model.sigma_xz)}",
                    f"{prefix}.sigma_zz = {_format_matrix(model.sigma_zz)}",
                ]
        full = self.resolve(path)
        with open(full, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        logger.info("Wrote pseudo-corrector %s (%d groups)", full, len(corrector.groups))
        return full

    def read_corrector(self, path: str) -> PseudoCorrector:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = fh.read()
        except OSError as e:
            raise IngestionError(f"cannot read corrector {path}: {e.strerror}") from None
        entries: Dict[str, str] = {}
        for number, line in enumerate(raw.splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"corrector line {number} is not 'key = value'", module="artifacts")
            entries[key.strip()] = value.strip()

        def get(key: str) -> str:
            if key not in entries:
                raise ConfigError(f"corrector is missing '{key}'", module="artifacts")
            return entries[key]

        groups: List[ProxyGroup] = []
        models: Dict[str, CalibrationModel] = {}
        available: Dict[str, Tuple[int, ...]] = {}
        for i in range(int(get("groups"))):
            prefix = f"group.{i}"
            covariates = tuple(get(f"{prefix}.covariates").split(","))
            proxies = tuple(tuple(p.split(",")) for p in get(f"{prefix}.proxies").split(";"))
            z_text = entries.get(f"{prefix}.z_columns", "")
            group = ProxyGroup(covariates, proxies, tuple(z_text.split(",")) if z_text else ())
            d = group.d
            delta = DeltaWeights(_parse_matrix(get(f"{prefix}.delta"), "delta").ravel(), get(f"{prefix}.delta_scheme"))
            m_per_proxy = [_parse_matrix(get(f"{prefix}.m.{j}"), f"m.{j}") for j in range(group.k)]
            has_z = f"{prefix}.mu_z" in entries
            models[group.name] = CalibrationModel.from_components(
                _parse_matrix(get(f"{prefix}.mu_x"), "mu_x").ravel(),
                _parse_matrix(get(f"{prefix}.sigma_xx_2"), "sigma_xx_2").reshape(d, d),
                m_per_proxy,
                delta,
                mu_z=_parse_matrix(get(f"{prefix}.mu_z"), "mu_z").ravel() if has_z else None,
                sigma_xz=_parse_matrix(get(f"{prefix}.sigma_xz"), "sigma_xz") if has_z else None,
                sigma_zz=_parse_matrix(get(f"{prefix}.sigma_zz"), "sigma_zz") if has_z else None,
                sigma_xx_1=_parse_matrix(get(f"{prefix}.sigma_xx_1"), "sigma_xx_1").reshape(d, d),
                m_total=_parse_matrix(get(f"{prefix}.m_total"), "m_total").reshape(d, d),
            )
            avail_text = entries.get(f"{prefix}.available", "")
            available[group.name] = tuple(int(j) for j in avail_text.split(",")) if avail_text else tuple(range(group.k))
            groups.append(group)
        if not groups:
            raise DataError(f"corrector {path} declares no proxy groups")
        return PseudoCorrector(tuple(groups), models, available)


artifact_manager = ArtifactManager()
