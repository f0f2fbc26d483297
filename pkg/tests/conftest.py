import os
import stat
import sys
import textwrap

import pytest

from vidatlas.env import EnvConfig
from vidatlas.media import SyntheticEvent, SyntheticSource, SyntheticVideoSpec
from vidatlas.orchestrator import EpisodeConfig

# Small tiles keep the pixel volume down; 32 px is the floor imposed by the
# timestamp strip, 64 px leaves room for burned-in label text.
FAST_TILE = 64


def synth_source(duration_s: float, events=(), seed: int = 0, fps: float = 25.0):
    return SyntheticSource(SyntheticVideoSpec(
        duration_s=duration_s, seed=seed, fps=fps,
        events=tuple(SyntheticEvent(*e) if isinstance(e, tuple) else e
                     for e in events)))


@pytest.fixture
def fast_env_config():
    return EnvConfig(tile_px=FAST_TILE)


@pytest.fixture
def fast_episode_config():
    return EpisodeConfig(tile_px=FAST_TILE)


@pytest.fixture
def fake_decoder(tmp_path):
    """Decoder stub honoring the subprocess contract: writes a solid PNG whose
    red channel encodes floor(t) so tests can verify the requested seek."""
    script = tmp_path / "fake_decoder.py"
    script.write_text(textwrap.dedent("""\
        import sys
        import numpy as np
        from PIL import Image

        src, t, out, edge = sys.argv[1], float(sys.argv[2]), sys.argv[3], int(sys.argv[4])
        if t < 0 or t >= 1e9:
            sys.exit(4)
        pixels = np.zeros((edge, edge, 3), dtype=np.uint8)
        pixels[..., 0] = int(t) % 256
        pixels[..., 1] = 200
        Image.fromarray(pixels).save(out)
    """))
    mode = os.stat(script).st_mode
    os.chmod(script, mode | stat.S_IXUSR)
    return (sys.executable, str(script))
