"""Small configurations shared by the training, CLI and experiment tests."""

import random

import torch

from ocgan.data import SyntheticConfig, make_synthetic_dataset
from ocgan.generator import GeneratorConfig
from ocgan.layout import Layout
from ocgan.scene_graph import build_scene_graph
from ocgan.sgsm import SGSM, SGSMConfig
from ocgan.training import ModelConfig

SGSM_TINY = dict(common_dim=8, input_resize=32, encoder_width=4, gcn_embed_dim=8, gcn_hidden_dim=8, gcn_layers=2)


def model_config(size=64, **kw):
    g = GeneratorConfig(num_classes=6, image_size=size, noise_dim=8, embedding_dim=8, base_channels=4,
                        mask_size=8, cond_hidden=8, max_objects=8)
    return ModelConfig(generator=g, patch_width=4, patch_depth=3, object_width=4, **kw)


def frozen_sgsm(seed=0):
    torch.manual_seed(seed)
    return SGSM(6, SGSMConfig(**SGSM_TINY)).freeze()


def dataset(n=40, seed=0):
    return make_synthetic_dataset(SyntheticConfig(n_images=n, seed=seed))


def layouts(rng: random.Random, n: int):
    out = []
    for _ in range(n):
        k = rng.randint(1, 3)
        boxes = []
        for _ in range(k):
            x0, y0 = rng.uniform(0, .6), rng.uniform(0, .6)
            boxes.append((x0, y0, x0 + rng.uniform(.15, .4), y0 + rng.uniform(.15, .4)))
        out.append(Layout.from_boxes([rng.randrange(6) for _ in range(k)], boxes))
    return out


def graphs(ls):
    return [build_scene_graph(l) for l in ls]


def experiment_dict(seed=0, n_images=60, iters=2):
    """A whole-pipeline config that runs in a few seconds on CPU."""
    return {
        "seed": seed,
        "data": {"n_images": n_images, "seed": seed},
        "sgsm": dict(SGSM_TINY),
        "sgsm_train": {"epochs": 1, "batch_size": 4, "seed": seed},
        "model": {"generator": {"noise_dim": 8, "embedding_dim": 8, "base_channels": 4, "mask_size": 8,
                                "cond_hidden": 8},
                  "patch_width": 4, "patch_depth": 3, "object_width": 4},
        "train": {"max_iters": iters, "batch_size": 2, "eval_every": 0, "seed": seed},
        "classifier": {"epochs": 1, "width": 4, "seed": seed},
        "eval": {"n_samples": 6, "n_splits": 2, "scene_crop_size": 64, "sample_seed": seed + 777},
    }
