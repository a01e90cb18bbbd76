from .dataset import (
    Splits,
    generate_dataset,
    load_dataset,
    load_sample,
    read_manifest,
    save_sample,
    split_sizes,
    write_dataset,
)
from .synthetic import SceneConfig, SceneSample, constant_plane_config, generate_sample

__all__ = [
    "SceneConfig", "SceneSample", "Splits", "constant_plane_config", "generate_dataset",
    "generate_sample", "load_dataset", "load_sample", "read_manifest", "save_sample",
    "split_sizes", "write_dataset",
]
