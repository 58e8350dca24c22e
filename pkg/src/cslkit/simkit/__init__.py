"""Hybrid acoustic-inertial session simulator."""

from .dataset import (
    CONDITIONS,
    gen_dataset,
    load_manifest,
    load_session,
    load_split,
    make_session,
    save_session,
    session_paths,
)
from .render import ArraySpec, MotionTrajectory, SessionData, spatialize
from .rir import RoomSpec, compute_rir
from .speech import SourceSignal, synth_speech

__all__ = [
    "CONDITIONS",
    "ArraySpec",
    "MotionTrajectory",
    "RoomSpec",
    "SessionData",
    "SourceSignal",
    "compute_rir",
    "gen_dataset",
    "load_manifest",
    "load_session",
    "load_split",
    "make_session",
    "save_session",
    "session_paths",
    "spatialize",
    "synth_speech",
]
