"""Lossless compressed collective communication for BF16 tensors.

The codec shrinks BF16 words from 16 to roughly 11 bits by remapping the
eight exponent bits onto a 3-bit code drawn from a seven-entry codebook; for
near-Gaussian tensors the codebook falls out of the standard deviation in
closed form.  Collectives (all-gather, all-to-all, reduce-scatter) move the
compressed frames over pluggable transports, and a profiled cost model
switches reduce-scatter between its native and compressed forms.
"""

from .bf16 import from_float32, from_float64, measure_sigma, to_float32, to_float64
from .codec import (
    GROUP_SIZE,
    WINDOW_OPT_U,
    CompressedChunk,
    ExponentCodebook,
    codebook_for,
    compress,
    decompress,
    decompress_group,
    derive_codebook,
    optimal_base_exponent,
    static_size_bytes,
    window_coverage,
)
from .container import (
    StaticDynamicSplit,
    parse,
    read_zbf16,
    serialize,
    split_static_dynamic,
    write_zbf16,
)
from .collectives import (
    AlltoAllSpec,
    reference_all_gather,
    reference_all_to_all,
    reference_reduce_scatter,
    zip_all_gather,
    zip_all_reduce,
    zip_all_to_all_d1,
    zip_all_to_all_d2,
    zip_reduce_scatter,
)
from .errors import (
    CollectiveError,
    CorruptChunkError,
    CorruptFrameError,
    DegenerateDataError,
    ProfilingError,
    ProtocolError,
    TransportError,
    TransportTimeout,
    UnrepresentableError,
    ZipcollError,
)
from .switcher import (
    CostModel,
    Path,
    crossover,
    fit_cost_model,
    predict,
    profile,
    select,
    switched_reduce_scatter,
)
from .transport import Communicator, SimProfile, connect_tcp, run_ranks

__version__ = "0.1.0"
