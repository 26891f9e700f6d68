"""Finite-difference gradient checks of both models on tiny configurations."""

from __future__ import annotations

from dataclasses import asdict

import torch

from . import lexicon
from .attention import grad_check
from .dataio.corpus import by_split, split_dataset
from .dataio.generator import GeneratorConfig, SceneGenerator
from .evaluation import evaluate
from .kevili import PRESETS as KEVILI_PRESETS
from .kevili import KeViLI
from .levilm import LeViLM

# small enough that perturbing every parameter entry stays cheap
TINY = dict(image_size=16, patch_size=8, d=8, heads=2)


def tiny_kevili(variant: str = "Q+K", seed: int = 0) -> KeViLI:
    return KeViLI(variant=variant, max_query_tokens=8, max_knowledge_tokens=12, text_layers=1,
                  knowledge_layers=1, interaction_layers=1, mlp_hidden=8, random_state=seed,
                  **TINY)


def tiny_levilm(variant: str = "Q+K+S", seed: int = 0) -> LeViLM:
    return LeViLM(variant=variant, layers=1, text_layers=1, max_prompt_tokens=24,
                  random_state=seed, **TINY)


def kevili_gradient_error(samples, epsilon: float = 1e-4, seed: int = 0,
                          variant: str = "Q+K") -> float:
    """Worst relative gradient error of the box-regression loss over every parameter."""
    model = tiny_kevili(variant, seed).init_model(samples)
    model.net_.train()
    batch = model.make_batch(samples)
    return grad_check(lambda: model.batch_loss(batch), list(model.net_.parameters()), epsilon)


def levilm_gradient_error(samples, epsilon: float = 1e-4, seed: int = 0,
                          variant: str = "Q+K+S") -> float:
    """Worst relative gradient error of the region-entity matching loss."""
    model = tiny_levilm(variant, seed)
    model._init_model(samples)
    model.net_.train()
    encoded = [model._encode(s, variant == "Q+K+S") for s in samples]
    batch = model._batch(samples, encoded, True)
    # random init leaves scores near zero; nudge them so the check also covers
    # the saturating part of the logistic loss
    with torch.no_grad():
        for p in model.net_.scoring_parameters():
            p.mul_(3.0)
    return grad_check(lambda: model._loss(batch), list(model.net_.parameters()), epsilon)


def memorize(samples, max_steps: int = 2000, target: float = 0.9, check_every: int = 50,
             seed: int = 0, **params):
    """Full-batch training of the toy-preset KeViLI on ``samples`` until IoU@0.5
    accuracy reaches ``target``; returns ``(accuracy, steps taken)``."""
    preset = KEVILI_PRESETS["toy"]
    settings = {**asdict(preset["config"]), "lr": preset["lr"], "encoder_lr": preset["encoder_lr"],
                "weight_decay": 0.0, **params}
    model = KeViLI(variant="Q+K", random_state=seed, **settings).init_model(samples)
    acc, step = model.score(samples), 0
    while step < max_steps and acc < target:
        for _ in range(min(check_every, max_steps - step)):
            model.train_step(samples)
            step += 1
        acc = model.score(samples)
    return acc, step


# Knowledge-effect experiment: hard-split accuracy of Q+K against Q-only.
KNOWLEDGE_EFFECT_MARGIN = 0.20
KNOWLEDGE_EFFECT_DATA = dict(stories_per_image=1, queries_per_story=2, filler_rate=0.0,
                             remark_rate=0.0, min_entities=3, max_entities=3, one_hop_rate=0.5)
KNOWLEDGE_EFFECT_MODEL = dict(max_prompt_tokens=80, text_layers=2, epochs=60, lr=2e-3,
                              text_lr=2e-3, shuffle_knowledge=True,
                              swap_groups=(lexicon.NAMES, lexicon.PROFESSIONS, lexicon.RELATIONS))


def knowledge_effect(seed: int = 0, n_samples: int = 2000, variants=("Q", "Q+K"),
                     strategy: str = "H", verbose: bool = False) -> dict:
    """Train one LeViLM per text variant on the train split and evaluate on test.

    Returns ``{variant: {"overall": acc, "easy": ..., "medium": ..., "hard": ...}}``.
    """
    gen = SceneGenerator(GeneratorConfig(seed=seed, **KNOWLEDGE_EFFECT_DATA))
    samples = split_dataset(gen.generate(n_samples), seed=seed)
    train, test = by_split(samples, "train"), by_split(samples, "test")
    result = {}
    for variant in variants:
        model = LeViLM(variant=variant, random_state=seed, verbose=verbose,
                       **KNOWLEDGE_EFFECT_MODEL).fit(train)
        report = evaluate(model, test, strategy)
        result[variant] = {"overall": report.overall, **report.difficulty}
    return result
