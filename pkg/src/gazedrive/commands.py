"""High-level driving commands that select network branches."""

import enum


class HighLevelCommand(enum.IntEnum):
    FOLLOW = 0
    LEFT = 1
    RIGHT = 2
    STRAIGHT = 3
    NO_COMMAND = 4

    @classmethod
    def parse(cls, name: str) -> "HighLevelCommand":
        key = name.strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown command {name!r}") from None


# commands that own a gaze-net branch; NO_COMMAND has no gaze branch
GAZE_COMMANDS = (
    HighLevelCommand.FOLLOW,
    HighLevelCommand.LEFT,
    HighLevelCommand.RIGHT,
    HighLevelCommand.STRAIGHT,
)


def gaze_branch_for(command: HighLevelCommand) -> HighLevelCommand:
    """Branch used when precomputing gaze maps; frames without a command use FOLLOW."""
    command = HighLevelCommand(command)
    return HighLevelCommand.FOLLOW if command is HighLevelCommand.NO_COMMAND else command
