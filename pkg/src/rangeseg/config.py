"""
Central configuration module for rangeseg paths and pipeline settings.

Paths resolve relative to the installed package and can be overridden via
environment variables. The pipeline configuration is composed with Hydra from
the packaged ``config/base.yaml``, merged with an optional user YAML file and
finally with dotted ``key=value`` overrides.

Environment Variables:
    RANGESEG_ROOT: Root directory of the project checkout
    RANGESEG_CONFIG: Directory holding base.yaml and the class mapping files
"""

import logging
import math
import os
from pathlib import Path
from typing import Dict, Iterable, Optional

from hydra import compose, initialize_config_dir
from omegaconf import DictConfig, OmegaConf
from omegaconf.errors import OmegaConfBaseException

from rangeseg.errors import ConfigurationError

log = logging.getLogger(__name__)

PipelineConfig = DictConfig

SINGLE_SCAN = 'single-scan'
MULTI_SCAN = 'multi-scan'


class PathConfig:
    """Central path configuration for rangeseg.

    All paths can be overridden via environment variables so the same code runs
    from a checkout, an installed wheel or a container.
    """

    PACKAGE_DIR = Path(__file__).parent
    PROJECT_ROOT = Path(os.getenv('RANGESEG_ROOT', PACKAGE_DIR.parent.parent))
    CONFIG_DIR = Path(os.getenv('RANGESEG_CONFIG', PACKAGE_DIR / 'config'))

    TEST_DIR = PROJECT_ROOT / 'test'

    @classmethod
    def get_test_paths(cls, module: str) -> Dict[str, Path]:
        """Get test paths for a specific module.

        Args:
            module: Name of the test module (e.g., 'range_view', 'cli')

        Returns:
            Dictionary containing paths for inputs, outputs and reports
        """
        module_dir = cls.TEST_DIR / module
        return {
            'inputs': module_dir / 'inputs_for_test',
            'outputs': module_dir / 'example_outputs',
            'reports': module_dir / 'reports',
        }

    @classmethod
    def resolve_data_file(cls, name: str) -> Path:
        """Resolve a mapping or frequency file name.

        Absolute paths and paths relative to the working directory win over the
        packaged config directory.
        """
        path = Path(name)
        if path.is_absolute() or path.exists():
            return path
        return cls.CONFIG_DIR / name

    @classmethod
    def ensure_output_dir(cls, path: Path) -> Path:
        """Ensure an output directory exists, creating it if necessary."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        return path


def load_config(
    config_path: Optional[Path] = None,
    overrides: Iterable[str] = (),
) -> PipelineConfig:
    """Compose the effective pipeline configuration.

    Args:
        config_path: Optional user YAML merged over the packaged defaults
        overrides: Dotted ``key=value`` strings applied last

    Returns:
        Validated, read-only DictConfig
    """
    with initialize_config_dir(config_dir=str(PathConfig.CONFIG_DIR.resolve()), version_base=None):
        conf = compose(config_name='base')
    OmegaConf.set_struct(conf, True)

    try:
        if config_path is not None:
            conf = OmegaConf.merge(conf, OmegaConf.load(config_path))
        overrides = list(overrides)
        if overrides:
            conf = OmegaConf.merge(conf, OmegaConf.from_dotlist(overrides))
    except OmegaConfBaseException as e:
        raise ConfigurationError(f'Invalid configuration: {e}') from e

    validate_config(conf)
    OmegaConf.set_readonly(conf, True)
    return conf


def dump_config(conf: PipelineConfig, path: Path) -> None:
    """Write the effective configuration so ``load_config(path)`` reproduces it."""
    OmegaConf.save(conf, path, resolve=True)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


def validate_config(conf: PipelineConfig) -> None:
    """Check documented numeric ranges and referenced files."""
    p = conf.projection
    _require(p.height >= 1 and p.width >= 1, f'projection size must be positive, got {p.height}x{p.width}')
    _require(p.fov_up_deg + p.fov_down_deg > 0, 'vertical field of view f_up + f_down must be positive')
    _require(p.elevation_offset in ('up', 'down'), f"projection.elevation_offset must be 'up' or 'down', not {p.elevation_offset}")

    _require(0 <= conf.residual.count <= 3, f'residual.count must be within 0..3, got {conf.residual.count}')
    _require(conf.residual.cap is None or conf.residual.cap > 0, 'residual.cap must be positive when set')

    n = conf.normalization
    _require(len(n.means) == 5 and len(n.stds) == 5, 'normalization means/stds need 5 entries (r, x, y, z, e)')
    _require(all(s > 0 for s in n.stds), 'normalization stds must be positive')

    a = conf.augmentation
    _require(0.0 <= a.flip_prob <= 1.0, 'augmentation.flip_prob must be within [0, 1]')
    _require(0.0 <= a.drop_max < 1.0, 'augmentation.drop_max must be within [0, 1)')
    _require(len(a.translation_std) == 3, 'augmentation.translation_std needs 3 entries')

    net = conf.network
    _require(len(net.backbone.encoder_channels) == 4, 'backbone needs 4 encoder stages')
    _require(len(net.backbone.decoder_channels) == 4, 'backbone needs 4 decoder stages')
    _require(net.row_chunk >= 1, 'network.row_chunk must be positive')

    k = conf.knn
    _require(k.window >= 1 and k.window % 2 == 1, f'knn.window must be odd and positive, got {k.window}')
    _require(1 <= k.k <= k.window ** 2, f'knn.k must be within 1..window^2, got {k.k}')
    _require(k.cutoff is None or k.cutoff > 0, 'knn.cutoff must be positive when set')
    _require(k.gaussian_sigma is None or k.gaussian_sigma > 0, 'knn.gaussian_sigma must be positive when set')

    l = conf.loss
    _require(min(l.w1, l.w2, l.w3) >= 0, 'loss weights must be non-negative')
    _require(l.theta0 >= 1 and l.theta0 % 2 == 1, f'loss.theta0 must be odd and positive, got {l.theta0}')

    _require(conf.evaluation.protocol in (SINGLE_SCAN, MULTI_SCAN), f'unknown protocol {conf.evaluation.protocol}')
    _require(conf.data.scan_stride >= 1, 'data.scan_stride must be positive')
    for key in ('single_scan_mapping', 'multi_scan_mapping', 'frequencies'):
        name = conf.data[key]
        if name is not None:
            _require(PathConfig.resolve_data_file(name).exists(), f'data.{key} file not found: {name}')

    g = conf.gradcheck
    _require(g.eps > 0 and g.tolerance > 0, 'gradcheck eps and tolerance must be positive')
    _require(all(math.isfinite(e) and e > 0 for e in g.eps_sweep), 'gradcheck.eps_sweep entries must be positive')
    _require(conf.bench.iterations >= 1, 'bench.iterations must be positive')
    _require(conf.bench.budget_ms > 0, 'bench.budget_ms must be positive')
    _require(conf.runtime.workers is None or conf.runtime.workers >= 0, 'runtime.workers must be non-negative')


def mapping_path(conf: PipelineConfig) -> Path:
    """Class mapping file for the configured evaluation protocol."""
    if conf.evaluation.protocol == SINGLE_SCAN:
        return PathConfig.resolve_data_file(conf.data.single_scan_mapping)
    return PathConfig.resolve_data_file(conf.data.multi_scan_mapping)


def residual_count(conf: PipelineConfig) -> int:
    """Residual channels fed to the network; single-scan runs use none."""
    if not conf.network.use_residual or conf.evaluation.protocol == SINGLE_SCAN:
        return 0
    return int(conf.residual.count)


def worker_count(conf: PipelineConfig) -> int:
    """Worker pool size; ``None`` means one per logical core."""
    if conf.runtime.workers is None:
        return os.cpu_count() or 1
    return int(conf.runtime.workers)
