"""Speaker diarization pipeline toolkit.

Scoring, PLDA/AHC/VB-HMM clustering, SAD fusion, DOVER-Lap hypothesis fusion,
domain routing and the iterative separation / TS-VAD adaptation loops, with
seeded synthetic backends for every model component.
"""

__version__ = "0.1.0"
