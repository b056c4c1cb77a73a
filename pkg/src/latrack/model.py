"""Tracker model: backbone + selection module + center head, with presets."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

from . import tensor as T
from .adaptation import SelectionModule
from .backbone import Backbone, BackboneConfig, paper_config, toy_config
from .head import CenterHead
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=toy_config)
    l_star: int = 4
    head_channels: int = 32
    selector_hidden: int = 160
    selector_input: str = "channel0"  # or "token0": first token's embedding
    use_selector: bool = True

    def __post_init__(self):
        if not 1 <= self.l_star < self.backbone.num_layers:
            raise ValueError(f"l_star {self.l_star} out of range 1..{self.backbone.num_layers - 1}")
        if self.selector_input not in ("channel0", "token0"):
            raise ValueError(f"unknown selector_input {self.selector_input!r}")

    @property
    def num_candidates(self) -> int:
        return self.backbone.num_layers - self.l_star

    @property
    def selector_input_dim(self) -> int:
        return self.backbone.n_tokens if self.selector_input == "channel0" else self.backbone.embed_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["template_size"] = list(self.backbone.template_size)
        d["backbone"]["search_size"] = list(self.backbone.search_size)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        bb = dict(d["backbone"])
        bb["template_size"] = tuple(bb["template_size"])
        bb["search_size"] = tuple(bb["search_size"])
        return ModelConfig(
            backbone=BackboneConfig(**bb),
            l_star=d["l_star"],
            head_channels=d["head_channels"],
            selector_hidden=d["selector_hidden"],
            selector_input=d["selector_input"],
            use_selector=d["use_selector"],
        )


def paper_model_config(**overrides) -> ModelConfig:
    base = dict(backbone=paper_config(), l_star=6, head_channels=256)
    base.update(overrides)
    return ModelConfig(**base)


def toy_model_config(**overrides) -> ModelConfig:
    base = dict(backbone=toy_config(), l_star=4, head_channels=32)
    base.update(overrides)
    return ModelConfig(**base)


class TrackerModel:
    """One-stream tracker with a dynamically retained deep layer."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.backbone = Backbone(config.backbone, seed=seed)
        grid = config.backbone.search_grid[0]
        self.head = CenterHead(config.backbone.embed_dim, grid, channels=config.head_channels, seed=seed)
        self.selector: SelectionModule | None = None
        if config.use_selector:
            self.selector = SelectionModule(
                config.selector_input_dim, config.num_candidates,
                hidden=config.selector_hidden, seed=seed,
            )

    def named_params(self):
        yield from self.backbone.named_params()
        if self.selector is not None:
            yield from self.selector.named_params()
        yield from self.head.named_params()

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def zero_grads(self) -> None:
        for _, p in self.named_params():
            p.zero_grad()

    def candidates(self, x_lstar: Tensor) -> list[Tensor]:
        """Skip-applied outputs of every layer after l_star, fed X^{l_star} directly."""
        cfg = self.config
        with T.no_grad():
            return [
                self.backbone.layer_forward(x_lstar, cfg.l_star + j)[0]
                for j in range(1, cfg.num_candidates + 1)
            ]
