"""Protocol engines: setting schedules, the classical channel, sifting,
Wigner and QBER tests, and the security decision."""
from .channel import ChannelMessage, LocalChannel, MessageType, read_frame, write_frame
from .schedule import MIN_SWITCH_INTERVAL_NS, ProtocolKind, SettingSchedule

_ENGINE_NAMES = {
    "BitKey", "Decision", "ProtocolRun", "prepare_streams", "QberEstimate", "SiftResult", "WignerEstimate",
    "estimate_probability", "estimate_qber", "exchange_settings", "run_protocol",
    "security_decision", "sift", "wigner_closed_form", "wigner_from_counts", "wigner_test",
    "wigner_test_over_channel",
}


def __getattr__(name):
    # engine imports chrono, which imports this package; load it on first use
    if name in _ENGINE_NAMES:
        from . import engine

        return getattr(engine, name)
    raise AttributeError(name)
