"""Run configuration: one YAML document drives ``run``, ``bench`` and ``augment``.

String values may reference environment variables as ``${NAME}``; this is the
intended way to supply API keys. The snapshot embedded in trajectories keeps
the unexpanded text so secrets never reach disk.
"""

from __future__ import annotations

import copy
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .agents import DEFAULT_DEADLINE_SECONDS
from .bench import DEFAULT_CONCURRENCY
from .browser import EnvConfig
from .gateway import ROLES, Backend, OpenAIChatBackend, ScriptedBackend, lookup_backend
from .grammar import DEFAULT_MODEL_EXTENT
from .orchestrator import Limits

_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
BACKEND_TYPES = ("openai", "scripted", "lookup")


class ConfigError(ValueError):
    pass


def interpolate(value, environ=os.environ):
    """Expand ``${NAME}`` in every string inside ``value``."""
    if isinstance(value, str):
        def sub(m):
            if m.group(1) not in environ:
                raise ConfigError(f"environment variable {m.group(1)} is not set")
            return environ[m.group(1)]

        return _VAR.sub(sub, value)
    if isinstance(value, dict):
        return {k: interpolate(v, environ) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v, environ) for v in value]
    return value


def redact(doc):
    """Copy of ``doc`` with literal API keys blanked; ``${NAME}`` references are kept."""
    if isinstance(doc, dict):
        return {
            k: ("***" if k == "api_key" and isinstance(v, str) and not _VAR.fullmatch(v) else redact(v))
            for k, v in doc.items()
        }
    if isinstance(doc, list):
        return [redact(v) for v in doc]
    return doc


def _pair(value, what: str) -> tuple[int, int]:
    try:
        a, b = value
        return int(a), int(b)
    except (TypeError, ValueError):
        raise ConfigError(f"{what} must be a pair of integers, got {value!r}") from None


@dataclass
class Config:
    role_backends: dict[str, dict | None] = field(default_factory=dict)
    env: EnvConfig = field(default_factory=EnvConfig)
    limits: Limits = field(default_factory=Limits)
    deadline_seconds: float = DEFAULT_DEADLINE_SECONDS
    concurrency: int = DEFAULT_CONCURRENCY
    output_dir: Path = Path("runs")
    probes: dict[str, dict] = field(default_factory=dict)
    snapshot: dict = field(default_factory=dict)
    environ: dict = field(default_factory=lambda: dict(os.environ), repr=False)

    def backend(self, role: str) -> Backend | None:
        spec = self.role_backends.get(role)
        return None if spec is None else build_backend(interpolate(spec, self.environ), role)

    def backends(self) -> dict[str, Backend | None]:
        """Fresh backend objects for every role (scripted ones restart their script)."""
        return {role: self.backend(role) for role in ROLES}

    def probe_backends(self) -> dict[str, Backend]:
        return {k: build_backend(interpolate(v, self.environ), f"probe {k}") for k, v in self.probes.items()}


def build_backend(spec: dict, role: str) -> Backend:
    if not isinstance(spec, dict):
        raise ConfigError(f"backend for {role} must be a mapping or null")
    kind = spec.get("type", "openai")
    if kind == "openai":
        for key in ("endpoint", "model"):
            if not spec.get(key):
                raise ConfigError(f"backend for {role} needs {key!r}")
        return OpenAIChatBackend(
            spec["endpoint"],
            spec["model"],
            api_key=spec.get("api_key"),
            timeout=float(spec.get("timeout", 60)),
            max_retries=int(spec.get("max_retries", 2)),
        )
    if kind == "scripted":
        replies = spec.get("replies")
        if not replies or not isinstance(replies, list):
            raise ConfigError(f"scripted backend for {role} needs a non-empty 'replies' list")
        return ScriptedBackend([str(r) for r in replies])
    if kind == "lookup":
        rules = spec.get("rules") or []
        try:
            pairs = [(str(p), str(r)) for p, r in rules]
        except (TypeError, ValueError):
            raise ConfigError(f"lookup backend for {role}: rules must be [pattern, reply] pairs") from None
        default = spec.get("default")
        return lookup_backend(pairs, None if default is None else str(default))
    raise ConfigError(f"backend for {role}: unknown type {kind!r} (expected one of {', '.join(BACKEND_TYPES)})")


def load_config(path: str | Path, environ: dict | None = None) -> Config:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc, base_dir=path.parent, environ=environ)


def config_from_dict(doc: dict, base_dir: Path = Path("."), environ: dict | None = None) -> Config:
    environ = dict(os.environ if environ is None else environ)
    backends = doc.get("backends") or {}
    if not isinstance(backends, dict):
        raise ConfigError("'backends' must be a mapping of role to backend")
    unknown = sorted(set(backends) - set(ROLES))
    if unknown:
        raise ConfigError(f"unknown roles in 'backends': {', '.join(unknown)}")
    missing = [r for r in ROLES if r not in backends]
    if missing:
        raise ConfigError(f"roles {', '.join(missing)} must be configured or set to null to disable them")
    for role, spec in backends.items():
        if spec is not None:
            # fail early on bad specs; real objects are built per run
            build_backend(interpolate(spec, environ), role)

    env_doc = dict(doc.get("env") or {})
    kind = env_doc.get("kind", "browser")
    graph = env_doc.get("page_graph")
    if graph is not None:
        graph = Path(interpolate(graph, environ))
        if not graph.is_absolute():
            graph = base_dir / graph
    model_extent = _pair(doc.get("model_extent", DEFAULT_MODEL_EXTENT), "model_extent")
    lim = doc.get("limits") or {}
    try:
        limits = Limits(
            max_steps=int(lim.get("max_steps", Limits.max_steps)),
            loop_window=int(lim.get("loop_window", Limits.loop_window)),
            loop_threshold=int(lim.get("loop_threshold", Limits.loop_threshold)),
            memory_capacity=int(doc.get("memory_capacity", Limits.memory_capacity)),
            model_extent=model_extent,
        )
        env = EnvConfig(
            kind=kind,
            viewport=_pair(env_doc.get("viewport", EnvConfig.viewport), "env.viewport"),
            page_graph=graph,
            executable=interpolate(env_doc.get("executable"), environ),
            ws_endpoint=interpolate(env_doc.get("ws_endpoint"), environ),
            headless=bool(env_doc.get("headless", True)),
            settle_timeout=float(env_doc.get("settle_timeout", EnvConfig.settle_timeout)),
            wait_seconds=float(env_doc.get("wait_seconds", EnvConfig.wait_seconds)),
            scroll_fraction=float(env_doc.get("scroll_fraction", EnvConfig.scroll_fraction)),
            extra_args=tuple(env_doc.get("extra_args") or ()),
        )
        deadline = float(lim.get("deadline_seconds", DEFAULT_DEADLINE_SECONDS))
        concurrency = int(doc.get("concurrency", DEFAULT_CONCURRENCY))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if kind not in ("browser", "simulated"):
        raise ConfigError(f"env.kind must be 'browser' or 'simulated', got {kind!r}")
    if kind == "simulated" and graph is None:
        raise ConfigError("a simulated env needs env.page_graph")
    if deadline < 0 or concurrency < 1:
        raise ConfigError("deadline_seconds must be >= 0 and concurrency >= 1")
    probes = doc.get("probes") or {}
    return Config(
        role_backends=dict(backends),
        env=env,
        limits=limits,
        deadline_seconds=deadline,
        concurrency=concurrency,
        output_dir=Path(interpolate(str(doc.get("output_dir", "runs")), environ)),
        probes=dict(probes),
        snapshot=redact(copy.deepcopy(doc)),
        environ=environ,
    )
