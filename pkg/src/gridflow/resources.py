"""Resource fabric: simulation programs virtualized behind one service shape.

A resource is a calculator (the machine that runs jobs) paired with one
installed program. Descriptors carry everything the system needs to choose,
license-check, and launch that pair: capability tags for discovery, a license
with its citation, and a launch template whose ``${placeholder}`` slots are
filled by pure text substitution when a job is rendered.

Execution itself is delegated to an executor object (see simgrid); this
module stays deterministic and free of clocks.
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass

from .errors import RuntimeFailure, UserError
from .quantities import ExtractionSpec, get_unit

__all__ = [
    "License",
    "Calculator",
    "LaunchTemplate",
    "LaunchPlan",
    "ResourceDescriptor",
    "BindingRequirement",
    "JobRequest",
    "JobHandle",
    "JobStatus",
    "UsageRecord",
    "ResourceRegistry",
    "render_launch",
    "load_descriptor",
    "parse_descriptor_xml",
    "render_descriptor_xml",
    "ResourceError",
    "DuplicateResource",
    "InvalidDescriptor",
    "UnknownResource",
    "ResourceWithdrawn",
    "UnknownJob",
    "UnboundPlaceholder",
    "MissingInput",
    "QUEUED",
    "RUNNING",
    "SUCCEEDED",
    "FAILED",
    "WITHDRAWN",
    "TERMINAL_STATES",
    "valid_transition",
]


class ResourceError(UserError):
    pass


class DuplicateResource(ResourceError):
    pass


class InvalidDescriptor(ResourceError):
    pass


class UnknownResource(ResourceError):
    pass


class ResourceWithdrawn(ResourceError):
    pass


class UnknownJob(ResourceError):
    pass


class UnboundPlaceholder(ResourceError):
    pass


class MissingInput(ResourceError):
    pass


LICENSE_KINDS = ("open", "academic", "commercial")

# job lifecycle; the only legal moves are queued->running->{succeeded,failed}
# and any non-terminal state -> withdrawn
QUEUED = "queued"
RUNNING = "running"
SUCCEEDED = "succeeded"
FAILED = "failed"
WITHDRAWN = "withdrawn"
TERMINAL_STATES = frozenset({SUCCEEDED, FAILED, WITHDRAWN})

_TRANSITIONS = {
    QUEUED: {RUNNING, WITHDRAWN},
    RUNNING: {SUCCEEDED, FAILED, WITHDRAWN},
    SUCCEEDED: set(),
    FAILED: set(),
    WITHDRAWN: set(),
}


def valid_transition(a: str, b: str) -> bool:
    return b in _TRANSITIONS[a]


@dataclass(frozen=True)
class License:
    kind: str
    citation: str = ""

    def __post_init__(self):
        if self.kind not in LICENSE_KINDS:
            raise InvalidDescriptor(f"unknown license kind: {self.kind!r}")
        if self.kind != "open" and not self.citation.strip():
            raise InvalidDescriptor(f"{self.kind} license requires a citation")


@dataclass(frozen=True)
class Calculator:
    name: str
    platform: str
    max_concurrent: int = 1

    def __post_init__(self):
        if self.max_concurrent < 1:
            raise InvalidDescriptor(f"calculator {self.name}: max_concurrent must be >= 1")


_PLACEHOLDER_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_.\-]*)\}")


@dataclass(frozen=True)
class LaunchTemplate:
    """Command pattern plus the dataset slots it consumes and produces.

    Each input slot names a staged file and the extraction spec applied to
    the upstream dataset before staging. Valid placeholders are the declared
    slot names, ``workdir``, and ``params.<key>``.
    """

    command_pattern: str
    input_slots: tuple[tuple[str, ExtractionSpec], ...]
    output_slot: str
    platform: str = "any"

    def __post_init__(self):
        names = [n for n, _ in self.input_slots]
        if len(set(names)) != len(names):
            raise InvalidDescriptor("duplicate input slot names in template")
        for name in self.placeholders():
            if name == "workdir" or name.startswith("params."):
                continue
            if name not in names:
                raise InvalidDescriptor(f"template references undeclared slot ${{{name}}}")

    def placeholders(self) -> tuple[str, ...]:
        return tuple(m.group(1) for m in _PLACEHOLDER_RE.finditer(self.command_pattern))

    def slot_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.input_slots)


@dataclass(frozen=True)
class LaunchPlan:
    command: str
    staged_inputs: tuple[tuple[str, str, str], ...]  # (slot, dataset hash, file path)
    output_slot: str
    workdir: str


@dataclass(frozen=True)
class ResourceDescriptor:
    """One calculator+program pair. `program` is the bare program name;
    discovery pins match on it, so the version lives in its own field."""

    id: str
    program: str
    calculator: Calculator
    capabilities: frozenset[str]
    license: License
    launch_template: LaunchTemplate
    cost_weight: float = 1.0
    version: str = ""

    def __post_init__(self):
        if not self.id:
            raise InvalidDescriptor("resource id must be nonempty")
        if not self.capabilities:
            raise InvalidDescriptor(f"resource {self.id}: capabilities must be nonempty")
        if self.cost_weight < 0:
            raise InvalidDescriptor(f"resource {self.id}: cost_weight must be nonnegative")

    @property
    def program_spec(self) -> str:
        return f"{self.program}-{self.version}" if self.version else self.program


@dataclass(frozen=True)
class BindingRequirement:
    """What an activity demands of a resource before it can run there."""

    activity_id: str
    program: str | None = None
    actuator: str | None = None
    capabilities: frozenset[str] = frozenset()

    def admits(self, d: ResourceDescriptor) -> bool:
        if self.actuator is not None and d.id != self.actuator:
            return False
        if self.program is not None and d.program != self.program:
            return False
        return self.capabilities <= d.capabilities


def _freeze_params(params) -> tuple[tuple[str, str], ...]:
    if hasattr(params, "items"):
        params = params.items()
    return tuple(sorted((str(k), str(v)) for k, v in params))


@dataclass(frozen=True)
class JobRequest:
    resource_id: str
    activity_id: str
    run_id: str
    inputs: tuple[tuple[str, str], ...]  # (slot name, dataset hash)
    params: tuple[tuple[str, str], ...] = ()

    @staticmethod
    def build(resource_id, activity_id, run_id, inputs=(), params=()) -> "JobRequest":
        if hasattr(inputs, "items"):
            inputs = inputs.items()
        return JobRequest(
            resource_id,
            activity_id,
            run_id,
            tuple((str(s), str(h)) for s, h in inputs),
            _freeze_params(params),
        )

    def param_map(self) -> dict[str, str]:
        return dict(self.params)

    def input_map(self) -> dict[str, str]:
        return dict(self.inputs)


@dataclass(frozen=True)
class JobHandle:
    job_id: str
    resource_id: str


@dataclass(frozen=True)
class JobStatus:
    state: str
    result: object | None = None  # storage key of the produced dataset
    reason: str | None = None

    def __post_init__(self):
        if self.state not in _TRANSITIONS:
            raise RuntimeFailure(f"unknown job state: {self.state!r}")

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL_STATES


@dataclass
class UsageRecord:
    resource_id: str
    started: int = 0
    succeeded: int = 0
    failed: int = 0
    withdrawn: int = 0
    wall_time: float = 0.0

    def check(self):
        if self.succeeded + self.failed > self.started:
            raise RuntimeFailure(f"{self.resource_id}: usage counters inconsistent")

    @property
    def settled(self) -> bool:
        return self.started == self.succeeded + self.failed + self.withdrawn


class ResourceRegistry:
    """Registered descriptors plus per-resource usage accounting.

    Withdrawn resources stay listed (provenance must keep resolving their
    descriptors) but are excluded from discovery and refuse new submissions.
    """

    def __init__(self):
        self._descriptors: dict[str, ResourceDescriptor] = {}
        self._withdrawn: set[str] = set()
        self._usage: dict[str, UsageRecord] = {}

    def register(self, d: ResourceDescriptor) -> str:
        if d.id in self._descriptors:
            raise DuplicateResource(f"resource already registered: {d.id}")
        self._descriptors[d.id] = d
        self._usage[d.id] = UsageRecord(d.id)
        return d.id

    def get(self, resource_id: str) -> ResourceDescriptor:
        try:
            return self._descriptors[resource_id]
        except KeyError:
            raise UnknownResource(f"unknown resource: {resource_id}") from None

    def ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._descriptors))

    def withdraw(self, resource_id: str):
        self.get(resource_id)
        self._withdrawn.add(resource_id)

    def is_withdrawn(self, resource_id: str) -> bool:
        return resource_id in self._withdrawn

    def check_submittable(self, resource_id: str):
        self.get(resource_id)
        if resource_id in self._withdrawn:
            raise ResourceWithdrawn(f"resource withdrawn: {resource_id}")

    def discover(self, req: BindingRequirement) -> list[str]:
        hits = [
            d
            for d in self._descriptors.values()
            if d.id not in self._withdrawn and req.admits(d)
        ]
        hits.sort(key=lambda d: (d.cost_weight, d.id))
        return [d.id for d in hits]

    def usage(self, resource_id: str) -> UsageRecord:
        self.get(resource_id)
        return self._usage[resource_id]

    def record_started(self, resource_id: str):
        self._usage[resource_id].started += 1

    def record_terminal(self, resource_id: str, state: str, wall_time: float = 0.0):
        rec = self._usage[resource_id]
        if state == SUCCEEDED:
            rec.succeeded += 1
        elif state == FAILED:
            rec.failed += 1
        elif state == WITHDRAWN:
            rec.withdrawn += 1
        else:
            raise RuntimeFailure(f"not a terminal state: {state}")
        rec.wall_time += wall_time
        rec.check()


def render_launch(t: LaunchTemplate, req: JobRequest, workdir: str) -> LaunchPlan:
    """Fill a launch template; pure text replacement, nothing is executed."""
    inputs = req.input_map()
    staged = []
    mapping = {"workdir": workdir}
    for slot, _spec in t.input_slots:
        if slot not in inputs:
            raise MissingInput(f"request missing input slot: {slot}")
        path = f"{workdir}/{slot}.dat"
        staged.append((slot, inputs[slot], path))
        mapping[slot] = path
    params = req.param_map()

    def fill(match: re.Match) -> str:
        name = match.group(1)
        if name in mapping:
            return mapping[name]
        if name.startswith("params."):
            key = name[len("params."):]
            if key in params:
                return params[key]
        raise UnboundPlaceholder(f"unbound placeholder ${{{name}}}")

    command = _PLACEHOLDER_RE.sub(fill, t.command_pattern)
    return LaunchPlan(command, tuple(staged), t.output_slot, workdir)


# ---------------------------------------------------------------------------
# XML descriptor files
#
#   <resource id="..." cost-weight="1.0">
#     <program name="..." version="..."/>
#     <calculator name="..." platform="..." max-concurrent="2"/>
#     <capabilities><capability>md</capability>...</capabilities>
#     <license kind="academic">citation text</license>
#     <template platform="..." output="result">
#       <command>prog ${conf} -o ${workdir}/out</command>
#       <input slot="conf"><want name="positions" unit="angstrom"/></input>
#     </template>
#   </resource>
# ---------------------------------------------------------------------------


def _require(elem: ET.Element | None, what: str) -> ET.Element:
    if elem is None:
        raise InvalidDescriptor(f"descriptor missing <{what}> element")
    return elem


def _attr(elem: ET.Element, name: str) -> str:
    value = elem.get(name)
    if value is None:
        raise InvalidDescriptor(f"<{elem.tag}> missing attribute {name!r}")
    return value


def parse_descriptor_xml(text: str) -> ResourceDescriptor:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise InvalidDescriptor(f"malformed XML: {exc}") from None
    if root.tag != "resource":
        raise InvalidDescriptor(f"root element must be <resource>, got <{root.tag}>")

    program = _require(root.find("program"), "program")
    program_name = _attr(program, "name")
    version = program.get("version", "")

    calc_elem = _require(root.find("calculator"), "calculator")
    try:
        max_concurrent = int(calc_elem.get("max-concurrent", "1"))
    except ValueError:
        raise InvalidDescriptor("max-concurrent must be an integer") from None
    calculator = Calculator(_attr(calc_elem, "name"), _attr(calc_elem, "platform"), max_concurrent)

    caps_elem = _require(root.find("capabilities"), "capabilities")
    capabilities = frozenset(
        (c.text or "").strip() for c in caps_elem.findall("capability") if (c.text or "").strip()
    )

    lic_elem = _require(root.find("license"), "license")
    license = License(_attr(lic_elem, "kind"), (lic_elem.text or "").strip())

    tmpl_elem = _require(root.find("template"), "template")
    cmd_elem = _require(tmpl_elem.find("command"), "command")
    slots = []
    for input_elem in tmpl_elem.findall("input"):
        wanted = []
        for want in input_elem.findall("want"):
            wanted.append((_attr(want, "name"), get_unit(_attr(want, "unit"))))
        slots.append((_attr(input_elem, "slot"), ExtractionSpec.of(*wanted)))
    template = LaunchTemplate(
        (cmd_elem.text or "").strip(),
        tuple(slots),
        _attr(tmpl_elem, "output"),
        tmpl_elem.get("platform", "any"),
    )

    try:
        cost_weight = float(root.get("cost-weight", "1.0"))
    except ValueError:
        raise InvalidDescriptor("cost-weight must be a number") from None
    return ResourceDescriptor(
        _attr(root, "id"),
        program_name,
        calculator,
        capabilities,
        license,
        template,
        cost_weight,
        version,
    )


def load_descriptor(path) -> ResourceDescriptor:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_descriptor_xml(fh.read())


def render_descriptor_xml(d: ResourceDescriptor) -> str:
    """Inverse of parse_descriptor_xml; deterministic bytes for a descriptor."""
    root = ET.Element("resource", {"id": d.id, "cost-weight": repr(d.cost_weight)})
    prog = {"name": d.program}
    if d.version:
        prog["version"] = d.version
    ET.SubElement(root, "program", prog)
    ET.SubElement(
        root,
        "calculator",
        {
            "name": d.calculator.name,
            "platform": d.calculator.platform,
            "max-concurrent": str(d.calculator.max_concurrent),
        },
    )
    caps = ET.SubElement(root, "capabilities")
    for cap in sorted(d.capabilities):
        ET.SubElement(caps, "capability").text = cap
    lic = ET.SubElement(root, "license", {"kind": d.license.kind})
    if d.license.citation:
        lic.text = d.license.citation
    tmpl = ET.SubElement(
        root,
        "template",
        {"platform": d.launch_template.platform, "output": d.launch_template.output_slot},
    )
    ET.SubElement(tmpl, "command").text = d.launch_template.command_pattern
    for slot, spec in d.launch_template.input_slots:
        inp = ET.SubElement(tmpl, "input", {"slot": slot})
        for name, unit in spec.wanted:
            ET.SubElement(inp, "want", {"name": name, "unit": unit.name})
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"
