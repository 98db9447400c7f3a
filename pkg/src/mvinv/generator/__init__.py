"""Differentiable 3D-aware generators."""

from mvinv.generator.toy import GeneratorWeights, RenderOutput, ToyGenerator, ToyGeneratorConfig

__all__ = ["GeneratorWeights", "RenderOutput", "ToyGenerator", "ToyGeneratorConfig"]
