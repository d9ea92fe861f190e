"""Feature exporter: pretrained-encoder features out, SLMF files in.

The aligner package stays free of ML-ecosystem dependencies; this
package is the bridge that runs a real encoder (or the built-in
filterbank frontend) over audio and writes the aligner's on-disk
formats.
"""

from .audio import DecodeError, read_wav
from .cli import ExportError, ExportJob, export, main, parse_audio_list
from .encoders import EncoderError, get_encoder
from .fbank import fbank, mel_filterbank
from .slmf import (
    FormatError,
    manifest_row,
    read_features,
    write_features,
    write_manifest,
)

__version__ = "0.1.0"
