"""GUI device abstraction: screenshots, grid labeling, and the nine actions.

Positions are communicated as numbered grid cells: the screenshot is covered
by fixed-size cells labeled 1..columns*rows, left to right and top to
bottom, and an instruction's position label resolves to the cell's center
(pulled inside the screen for partial edge cells).

Backends: `AdbBackend` drives a real Android device through the adb CLI;
`SimulatorBackend` replays a scripted screen state machine from a scenario
file, which keeps end-to-end runs hermetic and deterministic.

Simulator scenario format (whitespace-separated, `#` comments):

    SOAP-SIM v1
    screen <id> <png path relative to the file>
    initial <screen id>
    transition <screen|*> <action> <label|direction|-|*> <target screen>
    defect <screen> <tag> <free-text description of the seeded defect>
"""

from __future__ import annotations

import io
import math
import shlex
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from PIL import Image, ImageDraw, ImageFont

from .config import DeviceConfig
from .errors import (
    CaptureTimeout,
    DeviceUnavailable,
    ImageDecodeError,
    InvalidInstruction,
    LabelOutOfRange,
    NoGridContext,
)

ACTIONS = ("tap", "long_tap", "double_tap", "input", "scroll", "home", "enter", "landscape", "portrait")
DIRECTIONS = ("up", "down", "left", "right")
POSITION_ACTIONS = ("tap", "long_tap", "double_tap", "input")
NO_ARG_ACTIONS = ("home", "enter", "landscape", "portrait")

SIM_HEADER = "SOAP-SIM v1"


@dataclass(frozen=True)
class UiInstruction:
    """One of the nine actions plus validated arguments."""

    action: str
    position: int | None = None
    text: str | None = None
    direction: str | None = None

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise InvalidInstruction(f"unknown action {self.action!r}")
        has = {
            "position": self.position is not None,
            "text": self.text is not None,
            "direction": self.direction is not None,
        }
        expected = {
            "position": self.action in POSITION_ACTIONS,
            "text": self.action == "input",
            "direction": self.action == "scroll",
        }
        for arg, want in expected.items():
            if has[arg] != want:
                verb = "requires" if want else "does not take"
                raise InvalidInstruction(f"action {self.action!r} {verb} {arg!r}")
        if self.position is not None and self.position < 1:
            raise InvalidInstruction("position labels are positive integers")
        if self.direction is not None and self.direction not in DIRECTIONS:
            raise InvalidInstruction(f"unknown direction {self.direction!r}")

    def render(self) -> str:
        """Human-readable form used in detector queries and reports."""
        args = []
        if self.position is not None:
            args.append(f"position={self.position}")
        if self.text is not None:
            args.append(f"text={self.text!r}")
        if self.direction is not None:
            args.append(f"direction={self.direction}")
        return f"[{self.action}]" + (" " + " ".join(args) if args else "")


@dataclass(frozen=True)
class Grid:
    cell_size: int
    columns: int
    rows: int
    width: int
    height: int
    overlay_png: bytes

    @property
    def label_count(self) -> int:
        return self.columns * self.rows

    def cell_of(self, label: int) -> tuple[int, int]:
        """(row, column), 0-indexed, of a 1-based row-major label."""
        if not 1 <= label <= self.label_count:
            raise LabelOutOfRange(f"label {label} outside 1..{self.label_count}")
        return (label - 1) // self.columns, (label - 1) % self.columns

    def label_of(self, row: int, column: int) -> int:
        if not (0 <= row < self.rows and 0 <= column < self.columns):
            raise LabelOutOfRange(f"cell ({row},{column}) outside the grid")
        return row * self.columns + column + 1

    def cell_rect(self, label: int) -> tuple[int, int, int, int]:
        """Pixel rectangle (x0, y0, x1, y1) of a cell, clipped to the image."""
        row, col = self.cell_of(label)
        x0, y0 = col * self.cell_size, row * self.cell_size
        return x0, y0, min(x0 + self.cell_size, self.width), min(y0 + self.cell_size, self.height)


@dataclass(frozen=True)
class GuiStatus:
    image: bytes  # raw screenshot PNG
    width: int
    height: int
    grid: Grid | None = None
    captured_at: float = 0.0


@dataclass(frozen=True)
class ExecutionOutcome:
    instruction: UiInstruction
    x: int | None = None
    y: int | None = None


def label_to_coords(label: int, grid: Grid) -> tuple[int, int]:
    """Tap point for a label: the cell center, kept half a cell away from the
    right/bottom screen edges for partial cells, and always inside the cell."""
    row, col = grid.cell_of(label)
    half = grid.cell_size // 2
    x = max(min(col * grid.cell_size + half, grid.width - half), col * grid.cell_size)
    y = max(min(row * grid.cell_size + half, grid.height - half), row * grid.cell_size)
    return x, y


def _label_font(cell_size: int):
    try:
        return ImageFont.load_default(size=max(10, cell_size // 5))
    except TypeError:  # Pillow < 10.1 takes no size argument
        return ImageFont.load_default()


def label_grid(status: GuiStatus, cell_size: int = 100) -> GuiStatus:
    """Overlay the numbered grid on a screenshot and return the labeled status."""
    if cell_size < 20:
        raise ValueError("cell_size must be at least 20 px")
    try:
        img = Image.open(io.BytesIO(status.image)).convert("RGB")
    except Exception as exc:
        raise ImageDecodeError(f"cannot decode screenshot: {exc}") from exc
    width, height = img.size
    columns = math.ceil(width / cell_size)
    rows = math.ceil(height / cell_size)

    draw = ImageDraw.Draw(img)
    border = (190, 190, 190)
    for c in range(1, columns):
        draw.line([(c * cell_size, 0), (c * cell_size, height)], fill=border, width=1)
    for r in range(1, rows):
        draw.line([(0, r * cell_size), (width, r * cell_size)], fill=border, width=1)

    font = _label_font(cell_size)
    for label in range(1, columns * rows + 1):
        row, col = (label - 1) // columns, (label - 1) % columns
        x, y = col * cell_size + 3, row * cell_size + 2
        text = str(label)
        for dx, dy in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            draw.text((x + dx, y + dy), text, fill=(0, 0, 0), font=font)
        draw.text((x, y), text, fill=(255, 255, 255), font=font)

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    grid = Grid(cell_size=cell_size, columns=columns, rows=rows, width=width, height=height,
                overlay_png=buf.getvalue())
    return GuiStatus(image=status.image, width=status.width, height=status.height,
                     grid=grid, captured_at=status.captured_at)


class DeviceBackend(Protocol):
    needs_settle: bool

    def capture_png(self) -> bytes: ...

    def perform(self, instruction: UiInstruction, coords: tuple[int, int] | None) -> None: ...


class AdbBackend:
    """Drives a device through `adb [-s serial] ...` subprocess calls."""

    needs_settle = True

    def __init__(self, config: DeviceConfig, adb: str = "adb"):
        self.config = config
        self._base = [adb] + (["-s", config.adb_serial] if config.adb_serial else [])
        self._size: tuple[int, int] | None = None

    def _run(self, args: list[str], timeout: float | None = None) -> bytes:
        try:
            proc = subprocess.run(self._base + args, capture_output=True, timeout=timeout or 30.0)
        except FileNotFoundError as exc:
            raise DeviceUnavailable("adb binary not found") from exc
        except subprocess.TimeoutExpired as exc:
            raise CaptureTimeout(f"adb command timed out: {' '.join(args)}") from exc
        if proc.returncode != 0:
            raise DeviceUnavailable(f"adb failed ({proc.returncode}): {proc.stderr.decode(errors='replace')[:200]}")
        return proc.stdout

    def capture_png(self) -> bytes:
        return self._run(["exec-out", "screencap", "-p"], timeout=self.config.capture_timeout_s)

    def _shell(self, command: str) -> None:
        self._run(["shell", command])

    def screen_size(self) -> tuple[int, int]:
        if self._size is None:
            out = self._run(["shell", "wm size"]).decode()
            dims = out.split(":")[-1].strip().split("x")
            self._size = (int(dims[0]), int(dims[1]))
        return self._size

    def perform(self, instruction: UiInstruction, coords: tuple[int, int] | None) -> None:
        action = instruction.action
        if action == "tap":
            self._shell(f"input tap {coords[0]} {coords[1]}")
        elif action == "long_tap":
            x, y = coords
            self._shell(f"input swipe {x} {y} {x} {y} {self.config.long_tap_ms}")
        elif action == "double_tap":
            x, y = coords
            # One shell round-trip keeps the two taps inside the double-tap gap.
            self._shell(f"input tap {x} {y} && input tap {x} {y}")
        elif action == "input":
            self._shell(f"input tap {coords[0]} {coords[1]}")
            self._shell(f"input text {shlex.quote(instruction.text.replace(' ', '%s'))}")
        elif action == "scroll":
            width, height = self.screen_size()
            span_x, span_y = int(width * self.config.scroll_span), int(height * self.config.scroll_span)
            cx, cy = width // 2, height // 2
            moves = {
                "up": (cx, cy + span_y // 2, cx, cy - span_y // 2),
                "down": (cx, cy - span_y // 2, cx, cy + span_y // 2),
                "left": (cx + span_x // 2, cy, cx - span_x // 2, cy),
                "right": (cx - span_x // 2, cy, cx + span_x // 2, cy),
            }
            self._shell("input swipe {} {} {} {} 300".format(*moves[instruction.direction]))
        elif action == "home":
            self._shell("input keyevent KEYCODE_HOME")
        elif action == "enter":
            self._shell("input keyevent KEYCODE_ENTER")
        elif action == "landscape":
            self._shell("settings put system accelerometer_rotation 0")
            self._shell("settings put system user_rotation 1")
        elif action == "portrait":
            self._shell("settings put system accelerometer_rotation 0")
            self._shell("settings put system user_rotation 0")


@dataclass(frozen=True)
class SeededDefect:
    screen: str
    tag: str
    description: str


class SimulatorBackend:
    """Scripted screen state machine driven by a scenario file."""

    needs_settle = False

    def __init__(
        self,
        screens: dict[str, Path],
        initial: str,
        transitions: dict[tuple[str, str, str], str],
        defects: tuple[SeededDefect, ...] = (),
    ):
        if initial not in screens:
            raise ValueError(f"initial screen {initial!r} is not declared")
        for key, target in transitions.items():
            if target not in screens:
                raise ValueError(f"transition {key} targets unknown screen {target!r}")
        self.screens = screens
        self.initial = initial
        self.transitions = transitions
        self.defects = defects
        self.current = initial
        self.trace: list[str] = [initial]
        self._png_cache: dict[str, bytes] = {}

    @classmethod
    def from_scenario(cls, path: str | Path) -> "SimulatorBackend":
        path = Path(path)
        screens: dict[str, Path] = {}
        transitions: dict[tuple[str, str, str], str] = {}
        defects: list[SeededDefect] = []
        initial: str | None = None
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != SIM_HEADER:
            raise ValueError(f"not a {SIM_HEADER} scenario: {path}")
        for lineno, line in enumerate(lines[1:], start=2):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            kind = fields[0]
            if kind == "screen" and len(fields) == 3:
                screens[fields[1]] = (path.parent / fields[2]).resolve()
            elif kind == "initial" and len(fields) == 2:
                initial = fields[1]
            elif kind == "transition" and len(fields) == 5:
                screen, action, arg, target = fields[1:]
                if action not in ACTIONS:
                    raise ValueError(f"{path}:{lineno}: unknown action {action!r}")
                transitions[(screen, action, arg)] = target
            elif kind == "defect" and len(fields) >= 4:
                defects.append(SeededDefect(screen=fields[1], tag=fields[2], description=" ".join(fields[3:])))
            else:
                raise ValueError(f"{path}:{lineno}: cannot parse scenario line: {line!r}")
        if initial is None:
            raise ValueError(f"{path}: scenario declares no initial screen")
        return cls(screens=screens, initial=initial, transitions=transitions, defects=tuple(defects))

    def reset(self) -> None:
        self.current = self.initial
        self.trace = [self.initial]

    def capture_png(self) -> bytes:
        if self.current not in self._png_cache:
            png_path = self.screens[self.current]
            if not png_path.exists():
                raise DeviceUnavailable(f"simulator screen image missing: {png_path}")
            self._png_cache[self.current] = png_path.read_bytes()
        return self._png_cache[self.current]

    def perform(self, instruction: UiInstruction, coords: tuple[int, int] | None) -> None:
        if instruction.position is not None:
            arg = str(instruction.position)
        elif instruction.direction is not None:
            arg = instruction.direction
        else:
            arg = "-"
        for key in (
            (self.current, instruction.action, arg),
            (self.current, instruction.action, "*"),
            ("*", instruction.action, arg),
            ("*", instruction.action, "*"),
        ):
            if key in self.transitions:
                self._goto(self.transitions[key])
                return
        if instruction.action == "home":
            self._goto(self.initial)
        # No matching transition: the GUI is unaffected.

    def _goto(self, screen: str) -> None:
        self.current = screen
        self.trace.append(screen)


class DeviceSession:
    """One device handle: capture, label, execute, with grid context tracking."""

    def __init__(self, backend: DeviceBackend, config: DeviceConfig | None = None, clock=time.time):
        self.backend = backend
        self.config = config or DeviceConfig()
        self.clock = clock
        self.last_grid: Grid | None = None

    def capture(self) -> GuiStatus:
        png = self.backend.capture_png()
        try:
            with Image.open(io.BytesIO(png)) as img:
                width, height = img.size
        except Exception as exc:
            raise DeviceUnavailable(f"captured bytes are not a valid image: {exc}") from exc
        if width <= 0 or height <= 0:
            raise DeviceUnavailable("captured image has empty dimensions")
        return GuiStatus(image=png, width=width, height=height, grid=None, captured_at=self.clock())

    def label_capture(self, status: GuiStatus, cell_size: int | None = None) -> GuiStatus:
        labeled = label_grid(status, cell_size or self.config.cell_size)
        self.last_grid = labeled.grid
        return labeled

    def settle(self) -> None:
        if self.backend.needs_settle and self.config.settle_delay_ms > 0:
            time.sleep(self.config.settle_delay_ms / 1000.0)

    def execute(self, instruction: UiInstruction) -> ExecutionOutcome:
        coords = None
        if instruction.position is not None:
            if self.last_grid is None:
                raise NoGridContext("position-based instruction without a labeled capture")
            coords = label_to_coords(instruction.position, self.last_grid)
        self.backend.perform(instruction, coords)
        return ExecutionOutcome(instruction=instruction, x=coords[0] if coords else None,
                                y=coords[1] if coords else None)


def make_device(spec: str, config: DeviceConfig, clock=time.time) -> DeviceSession:
    """Build a device session from a CLI-style spec: `adb` or `sim:<scenario>`."""
    if spec == "adb":
        return DeviceSession(AdbBackend(config), config, clock)
    if spec.startswith("sim:"):
        return DeviceSession(SimulatorBackend.from_scenario(spec[4:]), config, clock)
    raise ValueError(f"unknown device spec {spec!r}")
