"""Virtual autofocusing toolkit.

Simulates defocused microscope captures from depth-layered samples using the
Born & Wolf defocus PSF, and recovers in-focus images from two-shot
out-of-focus pairs with a dual-encoder convolutional fusion network.
"""

from .optics import OpticalConfig, PsfKernel, bessel_j0, build_kernel, psf_value
from .imaging import (
    CapturePair,
    DepthLayeredSample,
    add_sensor_noise,
    capture_pair,
    convolve2d,
    generate_zstack,
    render,
)
from .focus import FocusScore, brenner, find_focus, select_sharper
from .phantom import (
    DatasetSplit,
    PatchRecord,
    PhantomSpec,
    build_dataset,
    sample_absolute_offset,
    synth_phantom,
)
from .tsva import TsvaConfig, TsvaModel, build, infer, load_checkpoint, save_checkpoint, train
from .pipeline import EvalReport, ScanPlan, cell_count, error_map, evaluate, psnr, scan_simulate

__version__ = "0.1.0"
