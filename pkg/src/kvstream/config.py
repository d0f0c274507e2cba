"""Run configuration shared by the harness and the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any

from .backbone import BackboneConfig
from .cache import CacheConfig
from .dtd import DtdConfig
from .packer import PackerConfig


@dataclass(frozen=True)
class RunConfig:
    # token dropping / packing
    tau_feat: float = 0.5
    block_size: int = 196
    # backbone
    layers: int = 4
    heads: int = 4
    head_dim: int = 16
    backbone_seed: int = 0
    qk_coupling: float = 1.0
    query_pooling: str = "mean"
    # compressor
    compressor: str = "gru"
    gru_seed: int = 0
    gru_hidden: int | None = None  # None -> heads * head_dim
    gru_init: str = "identity"
    # cache
    n_local_blocks: int = 4
    index_layers: tuple[int, ...] | None = None
    cold_store_path: str | None = None
    cold_version: int = 1
    # retrieval / answering
    top_k: int = 64
    retrieval_mode: str = "consensus"
    first_layer: int = 0
    last_layer: int | None = None
    position_mode: str = "original"
    mask_pads: bool = False

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.retrieval_mode not in ("consensus", "last_only"):
            raise ValueError("retrieval_mode must be 'consensus' or 'last_only'")
        if self.position_mode not in ("original", "contiguous"):
            raise ValueError("position_mode must be 'original' or 'contiguous'")
        if self.index_layers is not None:
            object.__setattr__(self, "index_layers", tuple(int(x) for x in self.index_layers))
        indexed = self.resolved_index_layers()
        for layer in self.retrieval_layers():
            if layer not in indexed:
                raise ValueError(f"retrieval layer {layer} is not in index_layers {indexed}")
        # validate the pieces eagerly
        self.dtd()
        self.packer()
        self.cache()

    @property
    def resolved_last_layer(self) -> int:
        return self.layers - 1 if self.last_layer is None else self.last_layer

    @property
    def key_dim(self) -> int:
        return self.gru_hidden or self.heads * self.head_dim

    def retrieval_layers(self) -> tuple[int, ...]:
        if self.retrieval_mode == "last_only":
            return (self.resolved_last_layer,)
        return (self.first_layer, self.resolved_last_layer)

    def resolved_index_layers(self) -> tuple[int, ...]:
        return CacheConfig(index_layers=self.index_layers).resolved_index_layers(self.layers)

    def dtd(self) -> DtdConfig:
        return DtdConfig(self.tau_feat)

    def packer(self) -> PackerConfig:
        return PackerConfig(self.block_size)

    def backbone(self, input_dim: int) -> BackboneConfig:
        return BackboneConfig(
            input_dim=input_dim,
            layers=self.layers,
            heads=self.heads,
            head_dim=self.head_dim,
            seed=self.backbone_seed,
            qk_coupling=self.qk_coupling,
            query_pooling=self.query_pooling,
        )

    def cache(self) -> CacheConfig:
        return CacheConfig(
            n_local_blocks=self.n_local_blocks,
            index_layers=self.index_layers,
            cold_store_path=self.cold_store_path,
            cold_version=self.cold_version,
            compressor=self.compressor,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if d["index_layers"] is not None:
            d["index_layers"] = list(d["index_layers"])
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
