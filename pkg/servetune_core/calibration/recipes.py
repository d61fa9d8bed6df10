from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Mapping, Tuple

from servetune_core.errors import InvalidParameter, UnknownRecipe

logger = logging.getLogger(__name__)


class QuantScheme(str, Enum):
    FP8_DYNAMIC = "fp8_dynamic"
    INT_W8A8 = "int_w8a8"
    INT_W4A16 = "int_w4a16"


class SamplingStrategy(str, Enum):
    UNIFORM = "uniform"
    LENGTH_WEIGHTED = "length_weighted"
    TOKEN_STRATIFIED = "token_stratified"


@dataclass(frozen=True)
class CompressionStrategy:
    """
    The executable form of a recipe, handed to a compression backend.
    """

    recipe_name: str
    scheme: QuantScheme
    calibration_samples: int
    layer_exclusions: Tuple[str, ...]
    sampling_strategy: SamplingStrategy

    @property
    def needs_calibration(self) -> bool:
        return self.calibration_samples > 0


@dataclass(frozen=True)
class Recipe:
    """
    Declarative compression recipe: scheme, calibration needs, layer policy.
    """

    name: str
    scheme: QuantScheme
    calibration_samples: int
    layer_exclusions: Tuple[str, ...] = ("lm_head",)
    sampling_strategy: SamplingStrategy = SamplingStrategy.UNIFORM

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise InvalidParameter("recipe name must be non-empty")
        if self.scheme is QuantScheme.FP8_DYNAMIC and self.calibration_samples != 0:
            raise InvalidParameter("fp8_dynamic recipes take no calibration samples")
        if self.scheme is not QuantScheme.FP8_DYNAMIC and self.calibration_samples < 1:
            raise InvalidParameter(f"{self.scheme.value} recipes need calibration samples")

    def create(self) -> CompressionStrategy:
        return CompressionStrategy(
            recipe_name=self.name,
            scheme=self.scheme,
            calibration_samples=self.calibration_samples,
            layer_exclusions=tuple(self.layer_exclusions),
            sampling_strategy=self.sampling_strategy,
        )

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "Recipe":
        try:
            return cls(
                name=str(data["name"]),
                scheme=QuantScheme(str(data["scheme"]).lower()),
                calibration_samples=int(data.get("calibration_samples", 0)),
                layer_exclusions=tuple(data.get("layer_exclusions", ("lm_head",))),
                sampling_strategy=SamplingStrategy(
                    str(data.get("sampling_strategy", "uniform")).lower()
                ),
            )
        except (KeyError, ValueError) as e:
            raise InvalidParameter(f"invalid recipe definition: {e}") from e


BUILTIN_RECIPES: Tuple[Recipe, ...] = (
    Recipe(name="int_w8a8", scheme=QuantScheme.INT_W8A8, calibration_samples=256),
    Recipe(name="int_w4a16", scheme=QuantScheme.INT_W4A16, calibration_samples=512),
    Recipe(name="fp8_dynamic", scheme=QuantScheme.FP8_DYNAMIC, calibration_samples=0),
)

_REGISTRY: Dict[str, Recipe] = {r.name: r for r in BUILTIN_RECIPES}


def get_recipe(name: str) -> Recipe:
    """
    Look up a recipe by name (case-insensitive).
    """
    try:
        return _REGISTRY[name.lower()]
    except KeyError:
        raise UnknownRecipe(
            f"Unknown recipe {name!r}. Registered: {', '.join(sorted(_REGISTRY))}"
        ) from None


def register_recipe(recipe: Recipe, *, overwrite: bool = False) -> Recipe:
    key = recipe.name.lower()
    if key in _REGISTRY and not overwrite and _REGISTRY[key] != recipe:
        raise InvalidParameter(f"recipe {recipe.name!r} is already registered")
    _REGISTRY[key] = recipe
    logger.info("Registered recipe %s (%s)", recipe.name, recipe.scheme.value)
    return recipe


def list_recipes() -> List[str]:
    return sorted(_REGISTRY)
