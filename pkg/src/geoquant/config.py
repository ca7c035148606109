"""Flat key=value run configuration with strict key checking.

A config file holds one `key = value` pair per line (# starts a comment).
Command-line `--set key=value` overrides file values; unknown keys are
rejected outright so a typo cannot silently change a run. The effective
config is echoed into the run directory and can be passed back via
--config to reproduce the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import UsageError

# key -> (type, default); None default means "fall back to the global seed"
KEY_SPECS: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "data.n_frames": (int, 64),
    "data.atoms": (int, 4),
    "data.potential": (str, "morse-pairwise"),
    "data.amplitude": (float, 0.15),
    "data.seed": (int, None),
    "model.layers": (int, 2),
    "model.f0": (int, 32),
    "model.f1": (int, 8),
    "model.rbf": (int, 16),
    "model.cutoff": (float, 4.0),
    "model.tau": (float, 10.0),
    "model.quant_mode": (str, "fp32"),
    "model.codebook": (str, "fibonacci(256)"),
    "model.seed": (int, None),
    "train.epochs": (int, 80),
    "train.n_warm": (int, 10),
    "train.lr": (float, 5e-3),
    "train.lr_decay": (float, 0.97),
    "train.lee_weight": (float, 0.01),
    "train.lee_rotations": (int, 1),
    "train.batch_size": (int, 8),
    "train.force_weight": (float, 10.0),
    "train.seed": (int, None),
    "md.steps": (int, 100000),
    "md.dt": (float, 0.5),
    "md.temperature": (float, 300.0),
    "md.report_every": (int, 10),
    "md.frame_index": (int, 0),
    "md.seed": (int, None),
    "bench.rows": (int, 12288),
    "bench.cols": (int, 12288),
    "bench.trials": (int, 30),
    "bench.warmup": (int, 5),
    "bench.seed": (int, None),
    "eval.rotations": (int, 100),
    "eval.seed": (int, None),
    "codebook.construction": (str, "fibonacci(256)"),
    "codebook.samples": (int, 100000),
    "codebook.seed": (int, None),
}


def _parse_value(key: str, raw: str):
    kind, _ = KEY_SPECS[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise UsageError(f"config key {key} expects {kind.__name__}, got {raw!r}") from exc


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | None, overrides: list[str] | None = None) -> "RunConfig":
        values: dict[str, object] = {}
        if path is not None:
            try:
                with open(path, "r", encoding="ascii") as f:
                    lines = f.readlines()
            except OSError as exc:
                raise UsageError(f"cannot read config file {path}: {exc}") from exc
            for lineno, line in enumerate(lines, 1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise UsageError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in text.split("=", 1))
                if key not in KEY_SPECS:
                    raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _parse_value(key, raw)
        for item in overrides or []:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            key, raw = (part.strip() for part in item.split("=", 1))
            if key not in KEY_SPECS:
                raise UsageError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, raw)
        return cls(values)

    def get(self, key: str):
        if key not in KEY_SPECS:
            raise UsageError(f"unknown config key {key!r}")
        if key in self.values:
            return self.values[key]
        _, default = KEY_SPECS[key]
        if default is None:  # section seed falls back to the global seed
            return self.get("seed")
        return default

    def echo_lines(self) -> list[str]:
        lines = []
        for key in sorted(KEY_SPECS):
            value = self.get(key)
            if isinstance(value, float):
                lines.append(f"{key} = {value!r}")
            else:
                lines.append(f"{key} = {value}")
        return lines

    def write_echo(self, path: str) -> None:
        with open(path, "w", encoding="ascii") as f:
            f.write("\n".join(self.echo_lines()) + "\n")
