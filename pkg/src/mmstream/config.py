"""Session configuration: one YAML file describing every host and node of the mesh."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .broker import parse_endpoint
from .errors import ConfigInvalid, InvalidTopic, NodeSpecError
from .node import CONSUMER, PIPELINE, PRODUCER, NodeSpec
from .simharness import SimSourceSpec
from .wire import match_topic, validate_topic

log = logging.getLogger(__name__)


def _known(cls, raw: dict, where: str) -> dict:
    names = {f.name for f in fields(cls)}
    extra = set(raw) - names
    if extra:
        raise ConfigInvalid(f"{where}: unknown keys {sorted(extra)}")
    return raw


@dataclass
class HostConfig:
    id: str
    endpoint: str
    reference_clock: bool = False
    flush_period_s: float = 1.0
    clock_offset_ms: float = 0.0
    clock_drift_ppm: float = 0.0


@dataclass
class SyncConfig:
    resync_period_s: float = 10.0
    step_threshold_ms: float = 100.0
    slew_rate_ppm: float = 500.0
    probes: int = 4


@dataclass
class AlignSpec:
    strategy: str = "pull"
    rate_hz: float | None = None
    stale_ms: float = 25.0
    nominal_period_ms: float | dict = 10.0
    pairing_window_ms: float | None = None
    late_policy: str = "discard"
    sources: list[str] | None = None


@dataclass
class VideoSpec:
    width: int
    height: int
    fps: float
    encoder_cmd: str
    channels: int = 3


@dataclass
class NodeConfig:
    name: str
    kind: str
    host: str
    publishes: list[str] = field(default_factory=list)
    subscribes: list[str] = field(default_factory=list)
    sim: dict | None = None
    seed: int = 0
    adapter: str | None = None
    handler: str = "builtin:count"
    infer: str = "builtin:stub"
    infer_latency_ms: float = 0.0
    align: AlignSpec | None = None
    video: VideoSpec | None = None

    def node_spec(self) -> NodeSpec:
        return NodeSpec(self.name, self.kind, self.host, list(self.publishes), list(self.subscribes))

    def sim_spec(self) -> SimSourceSpec:
        return SimSourceSpec.from_dict(dict(self.sim or {}))


@dataclass
class SessionConfig:
    session: str
    hosts: list[HostConfig]
    nodes: list[NodeConfig] = field(default_factory=list)
    output_dir: str = "sessions"
    sync: SyncConfig = field(default_factory=SyncConfig)
    sim_speedup: float = 1.0
    shutdown_timeout_s: float = 10.0
    warnings: list[str] = field(default_factory=list, compare=False, repr=False)

    def host(self, host_id: str) -> HostConfig:
        for h in self.hosts:
            if h.id == host_id:
                return h
        raise ConfigInvalid(f"unknown host {host_id!r}; config declares {[h.id for h in self.hosts]}")

    @property
    def reference(self) -> HostConfig:
        return next(h for h in self.hosts if h.reference_clock)

    def nodes_on(self, host_id: str) -> list[NodeConfig]:
        return [n for n in self.nodes if n.host == host_id]

    def topics(self) -> dict[str, str]:
        """``{topic: publishing node}``."""
        return {t: n.name for n in self.nodes for t in n.publishes}

    def session_dir(self, base: str | Path | None = None) -> Path:
        return Path(base if base is not None else self.output_dir) / self.session

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("warnings")
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")


def parse_config(raw: dict) -> SessionConfig:
    if not isinstance(raw, dict):
        raise ConfigInvalid("config must be a mapping")
    raw = dict(raw)
    _known(SessionConfig, raw, "session")
    if "session" not in raw or "hosts" not in raw:
        raise ConfigInvalid("config needs 'session' and 'hosts'")
    try:
        hosts = [HostConfig(**_known(HostConfig, dict(h), f"host {h.get('id')}")) for h in raw.pop("hosts") or []]
        nodes = []
        for n in raw.pop("nodes", None) or []:
            n = dict(_known(NodeConfig, dict(n), f"node {n.get('name')}"))
            if n.get("align") is not None:
                n["align"] = AlignSpec(**_known(AlignSpec, dict(n["align"]), f"node {n['name']} align"))
            if n.get("video") is not None:
                n["video"] = VideoSpec(**_known(VideoSpec, dict(n["video"]), f"node {n['name']} video"))
            n["publishes"] = list(n.get("publishes") or [])
            n["subscribes"] = list(n.get("subscribes") or [])
            nodes.append(NodeConfig(**n))
        sync = SyncConfig(**_known(SyncConfig, dict(raw.pop("sync", None) or {}), "sync"))
    except TypeError as exc:
        raise ConfigInvalid(str(exc)) from exc
    cfg = SessionConfig(hosts=hosts, nodes=nodes, sync=sync, **raw)
    validate(cfg)
    return cfg


def validate(cfg: SessionConfig) -> None:
    """Raise ConfigInvalid on hard errors; soft findings go to ``cfg.warnings``."""
    if not cfg.hosts:
        raise ConfigInvalid("no hosts declared")
    ids = [h.id for h in cfg.hosts]
    if len(set(ids)) != len(ids):
        raise ConfigInvalid(f"duplicate host ids in {ids}")
    refs = [h.id for h in cfg.hosts if h.reference_clock]
    if len(refs) != 1:
        raise ConfigInvalid(f"exactly one reference_clock host required, found {refs or 'none'}")
    endpoints = set()
    for h in cfg.hosts:
        try:
            ep = parse_endpoint(h.endpoint)
        except ValueError as exc:
            raise ConfigInvalid(f"host {h.id}: {exc}") from exc
        if ep in endpoints:
            raise ConfigInvalid(f"host {h.id}: endpoint {h.endpoint} used twice")
        endpoints.add(ep)
        if h.flush_period_s <= 0:
            raise ConfigInvalid(f"host {h.id}: flush_period_s must be > 0")
    if cfg.sim_speedup <= 0:
        raise ConfigInvalid("sim_speedup must be > 0")
    names = set()
    owner: dict[str, str] = {}
    for n in cfg.nodes:
        if n.name in names:
            raise ConfigInvalid(f"duplicate node name {n.name!r}")
        names.add(n.name)
        if n.host not in ids:
            raise ConfigInvalid(f"node {n.name}: unknown host {n.host!r}")
        try:
            n.node_spec()
        except (NodeSpecError, InvalidTopic) as exc:
            raise ConfigInvalid(f"node {n.name}: {exc}") from exc
        for t in n.publishes:
            if t in owner:
                raise ConfigInvalid(f"topic {t!r} published by both {owner[t]} and {n.name}")
            owner[t] = n.name
        for p in n.subscribes:
            try:
                validate_topic(p) if p != "*" else None
            except InvalidTopic as exc:
                raise ConfigInvalid(f"node {n.name}: bad prefix {p!r}: {exc}") from exc
        if n.kind == PRODUCER:
            if n.sim is None and n.adapter is None:
                raise ConfigInvalid(f"producer {n.name} needs 'sim' or 'adapter'")
            if n.sim is not None:
                try:
                    n.sim_spec()
                except (TypeError, ValueError) as exc:
                    raise ConfigInvalid(f"producer {n.name}: bad sim spec: {exc}") from exc
        if n.kind == PIPELINE:
            if n.align is None:
                raise ConfigInvalid(f"pipeline {n.name} needs an 'align' section")
            if n.align.strategy not in ("push", "pull", "intra"):
                raise ConfigInvalid(f"pipeline {n.name}: unknown strategy {n.align.strategy!r}")
            if n.align.strategy == "pull" and not n.align.rate_hz:
                raise ConfigInvalid(f"pipeline {n.name}: pull strategy needs rate_hz")
        if n.video is not None and n.kind != PRODUCER:
            raise ConfigInvalid(f"node {n.name}: only producers can declare video")
    cfg.warnings = []
    for n in cfg.nodes:
        if n.kind not in (CONSUMER, PIPELINE):
            continue
        for p in n.subscribes:
            if not any(match_topic(p, t) for t in owner):
                cfg.warnings.append(f"node {n.name}: prefix {p!r} matches no declared topic")
    for w in cfg.warnings:
        log.warning(w)


def load_config(path: str | Path) -> SessionConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigInvalid(f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc
    return parse_config(raw)
