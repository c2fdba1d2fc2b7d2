from enum import Enum


class TaskKind(str, Enum):
    HINGE_OSTIA = "HingeOstia"
    MEMBRANOUS_SEPTUM = "MembranousSeptum"
    CALCIFICATION = "Calcification"
    DOWNSTREAM_VESSEL = "DownstreamVessel"

    def __str__(self):
        return self.value

    @property
    def is_landmark(self) -> bool:
        return self in LANDMARK_TASKS

    @property
    def channels(self) -> tuple:
        return TASK_CHANNELS[self]


# DownstreamVessel is only ever used for last-layer transfer.
FEDERATED_TASKS = (TaskKind.HINGE_OSTIA, TaskKind.MEMBRANOUS_SEPTUM, TaskKind.CALCIFICATION)
LANDMARK_TASKS = frozenset({TaskKind.HINGE_OSTIA, TaskKind.MEMBRANOUS_SEPTUM})

TASK_CHANNELS = {
    TaskKind.HINGE_OSTIA: ("RCC", "LCC", "NCC", "RCO", "LCO"),
    TaskKind.MEMBRANOUS_SEPTUM: ("MS1", "MS2"),
    TaskKind.CALCIFICATION: ("calc",),
    TaskKind.DOWNSTREAM_VESSEL: ("vessel",),
}

LANDMARK_NAMES = ("RCC", "LCC", "NCC", "RCO", "LCO", "MS1", "MS2")


def parse_task(value) -> TaskKind:
    if isinstance(value, TaskKind):
        return value
    try:
        return TaskKind(value)
    except ValueError:
        for t in TaskKind:
            if t.name.lower() == str(value).lower() or t.value.lower() == str(value).lower():
                return t
        raise ValueError(f"unknown task {value!r}") from None
