"""Per-node link shaping state.

A LinkConfig is a value: delay_ms (applied symmetrically to traffic to and
from the node) and rate_kbit (None means unlimited). The table applies whole
configs, never merges: apply replaces, reset restores the default. Rate is
held as configuration state; delivery timing uses only the delay.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

UNLIMITED = None


class LinkError(Exception):
    pass


class UnknownNode(LinkError):
    pass


@dataclass(frozen=True)
class LinkConfig:
    delay_ms: int = 0
    rate_kbit: int | None = UNLIMITED

    def __post_init__(self) -> None:
        if self.delay_ms < 0:
            raise ValueError("delay_ms must be >= 0")
        if self.rate_kbit is not None and self.rate_kbit <= 0:
            raise ValueError("rate_kbit must be positive or unlimited (None)")


DEFAULT_LINK = LinkConfig()


def parse_rate(text: str) -> int | None:
    if text.strip().lower() == "unlimited":
        return UNLIMITED
    return int(text)


def format_rate(rate: int | None) -> str:
    return "unlimited" if rate is None else str(rate)


class LinkTable:
    """Link config per known node address. Unconfigured nodes use the default."""

    def __init__(self, nodes: Iterable[str]) -> None:
        self._known = set(nodes)
        self._configs: dict[str, LinkConfig] = {}

    def _require(self, node: str) -> None:
        if node not in self._known:
            raise UnknownNode(f"no node {node!r}")

    def get(self, node: str) -> LinkConfig:
        self._require(node)
        return self._configs.get(node, DEFAULT_LINK)

    def apply(self, node: str, cfg: LinkConfig) -> LinkConfig:
        """Install cfg for node, returning the previous config (replace, not merge)."""
        self._require(node)
        previous = self.get(node)
        self._configs[node] = cfg
        return previous

    def reset(self, node: str) -> LinkConfig:
        """Remove node's config, returning what was removed. Idempotent."""
        self._require(node)
        return self._configs.pop(node, DEFAULT_LINK)

    def delay_us(self, node: str) -> int:
        return self.get(node).delay_ms * 1000

    def shaped_nodes(self) -> list[str]:
        return sorted(self._configs)
