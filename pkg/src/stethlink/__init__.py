"""Software twin of a wireless electronic stethoscope.

Front-end emulation (:mod:`stethlink.chain`, :mod:`stethlink.estimators`),
a simulated low-rate wireless link (:mod:`stethlink.transport`), heart sound
analysis (:mod:`stethlink.analysis`), WAV storage (:mod:`stethlink.wav`) and
LAN broadcast (:mod:`stethlink.service`).
"""
from .analysis import BandSpec, HeartEvent, HeartSoundDetector, band_energy, detect_heart_sounds, estimate_heart_rate
from .chain import (
    AudioBuffer,
    BiquadSection,
    ChainConfig,
    SampleBlock,
    TransmitChain,
    dequantize_dac,
    design_lowpass,
    filter_apply,
    power_amplify,
    preamplify,
    quantize_adc,
    run_transmit_chain,
)
from .estimators import make_transmit_pipeline
from .pipeline import process, simulate
from .transport import LinkParams, Packet, decode_packet, encode_packet, link_transmit, packetize, reassemble
from .wav import read_wav, write_wav

__version__ = "0.1.0"
