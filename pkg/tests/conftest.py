import textwrap

import pytest


@pytest.fixture
def write_config(tmp_path):
    """Write a tiny synthetic-data run config; returns the TOML path."""

    def _write(name="desk", **overrides):
        defaults = dict(seed=0, classes=2, per_class=16, epochs=2,
                        teacher_epochs=2, noise=0.15)
        defaults.update(overrides)
        text = textwrap.dedent(f"""\
            [run]
            name = "{name}"
            out_dir = "{(tmp_path / 'runs').as_posix()}"
            seed = {defaults['seed']}

            [data]
            kind = "synthetic"
            classes = {defaults['classes']}
            per_class = {defaults['per_class']}
            image_hw = [32, 32]
            split_ratio = 0.8
            noise = {defaults['noise']}

            [teacher]
            width = 0.25
            epochs = {defaults['teacher_epochs']}
            lr = 0.02

            [student]
            stem_channels = 8
            stages = [
                {{out_channels = 16, blocks = 2, ghost_ratio = 0.25, stride = 2}},
                {{out_channels = 32, blocks = 3, ghost_ratio = 0.5, stride = 2}},
            ]

            [train]
            epochs = {defaults['epochs']}
            batch_size = 32
            lr = 0.02

            [distill]
            enabled = true
            temperature = 4.0
            """)
        path = tmp_path / f"{name}.toml"
        path.write_text(text)
        return path

    return _write
