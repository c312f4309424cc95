"""Toy instruction set, program container, text assembly, and built-in scenarios.

Instructions are plain tuples (opcode first) so the interpreter hot loop stays
cheap. Function bodies may contain inline ("label", name) markers; they occupy
no code slot and are resolved when a program is loaded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PAGE = 4096
INSTR_PER_PAGE = 64
WORD = 8
LINE = 64

ALU_OPS = ("add", "sub", "mul", "and", "or", "xor", "shl", "shr", "eq", "lt", "mov")

# Application-facing opcodes (accepted by the text assembly format).
APP_OPS = (
    "li", "alui", "alur", "rd", "wr", "bz", "call", "ret", "eexit",
    "xbegin", "xend", "mark", "cas", "corid", "fence",
)

# Emitted only by the defense code generators, never by application code.
RUNTIME_OPS = ("regint", "sbe", "simaex", "rstctx")

# Emitted only by the loader when it expands a preload marker.
INTERNAL_OPS = ("touchr", "touchrw", "touchx")


def LoadImm(dst, imm):
    return ("li", dst, imm)


def Alu(op, dst, src_reg):
    if op not in ALU_OPS:
        raise ValueError(f"unknown alu op {op!r}")
    return ("alur", op, dst, src_reg)


def AluI(op, dst, imm):
    if op not in ALU_OPS:
        raise ValueError(f"unknown alu op {op!r}")
    return ("alui", op, dst, imm)


def Read(dst, addr_reg):
    return ("rd", dst, addr_reg)


def Write(addr_reg, src):
    return ("wr", addr_reg, src)


def BranchIfZero(reg, label):
    return ("bz", reg, label)


def Call(fname):
    return ("call", fname)


def Ret():
    return ("ret",)


def EExit():
    return ("eexit",)


def XBegin(abort_label):
    return ("xbegin", abort_label)


def XEnd():
    return ("xend",)


def PreloadMarker(page_set_id="default"):
    return ("mark", page_set_id)


def CmpXchg(addr_reg, expected_reg, new_reg, dst):
    return ("cas", addr_reg, expected_reg, new_reg, dst)


def ReadPhysCoreId(dst):
    return ("corid", dst)


def Fence():
    return ("fence",)


def Label(name):
    return ("label", name)


def Addr(page_name, offset=0):
    """Symbolic data address, patched to an absolute int by the loader."""
    return ("@", page_name, offset)


@dataclass
class DataPage:
    """One 4 KiB data page. init maps word offsets to initial values."""

    name: str
    rights: str = "rw"  # "ro" or "rw"
    init: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rights not in ("ro", "rw"):
            raise ValueError(f"bad data page rights {self.rights!r}")


@dataclass
class PageSet:
    """Ordered preload set. Items are symbolic until load time.

    Each item is ("all",), ("func", name), ("data", name) or
    ("data", name, touch) where touch overrides how the page is touched
    ("ro" forces a read-only touch of a writable page).
    """

    sid: str = "default"
    items: tuple = (("all",),)


@dataclass
class Program:
    functions: dict = field(default_factory=dict)  # name -> list of instruction tuples
    data_pages: list = field(default_factory=list)
    secret_slots: list = field(default_factory=list)  # (page_name, offset)
    entry_points: list = field(default_factory=list)
    page_sets: dict = field(default_factory=dict)  # sid -> PageSet
    meta: dict = field(default_factory=dict)

    def function_size(self, name):
        # labels occupy no slot
        return sum(1 for ins in self.functions[name] if ins[0] != "label")

    def copy(self):
        return Program(
            functions={k: list(v) for k, v in self.functions.items()},
            data_pages=[DataPage(p.name, p.rights, dict(p.init)) for p in self.data_pages],
            secret_slots=list(self.secret_slots),
            entry_points=list(self.entry_points),
            page_sets=dict(self.page_sets),
            meta=dict(self.meta),
        )


class ProgramError(Exception):
    pass


def finalize_function(body):
    """Strip inline labels, return (instructions, label -> index map)."""
    labels = {}
    out = []
    for ins in body:
        if ins[0] == "label":
            if ins[1] in labels:
                raise ProgramError(f"duplicate label {ins[1]!r}")
            labels[ins[1]] = len(out)
        else:
            out.append(ins)
    for ins in out:
        if ins[0] in ("bz", "xbegin") and isinstance(ins[-1], str):
            if ins[-1] not in labels:
                raise ProgramError(f"unresolved label {ins[-1]!r}")
    return out, labels


def validate_program(program):
    names = [p.name for p in program.data_pages]
    if len(set(names)) != len(names):
        raise ProgramError("duplicate data page names")
    for e in program.entry_points:
        if e not in program.functions and not e.startswith("native:"):
            raise ProgramError(f"entry point {e!r} is not a function")
    for page, off in program.secret_slots:
        if page not in names:
            raise ProgramError(f"secret slot page {page!r} missing")
    for fname, body in program.functions.items():
        finalize_function(body)
        for ins in body:
            if ins[0] == "call" and ins[1] not in program.functions:
                raise ProgramError(f"{fname}: call target {ins[1]!r} missing")


# ---------------------------------------------------------------------------
# Text assembly format


def emit_asm(program):
    lines = []
    for p in program.data_pages:
        lines.append(f".data {p.name} {p.rights}")
        for off in sorted(p.init):
            lines.append(f"  {off} = {p.init[off]}")
    for page, off in program.secret_slots:
        lines.append(f".secret {page} {off}")
    for e in program.entry_points:
        lines.append(f".entry {e}")
    for ps in program.page_sets.values():
        parts = []
        for it in ps.items:
            parts.append(":".join(str(x) for x in it))
        lines.append(f".pageset {ps.sid} " + " ".join(parts))
    for fname, body in program.functions.items():
        lines.append(f".func {fname}")
        for ins in body:
            if ins[0] == "label":
                lines.append(f"{ins[1]}:")
            else:
                lines.append("  " + _ins_to_text(ins))
    return "\n".join(lines) + "\n"


def _operand_text(v):
    if isinstance(v, tuple) and v and v[0] == "@":
        return f"@{v[1]}+{v[2]}"
    return str(v)


def _ins_to_text(ins):
    op = ins[0]
    if op == "li":
        return f"li r{ins[1]}, {_operand_text(ins[2])}"
    if op == "alui":
        return f"{ins[1]}i r{ins[2]}, {_operand_text(ins[3])}"
    if op == "alur":
        return f"{ins[1]} r{ins[2]}, r{ins[3]}"
    if op == "rd":
        return f"rd r{ins[1]}, [r{ins[2]}]"
    if op == "wr":
        return f"wr [r{ins[1]}], r{ins[2]}"
    if op == "bz":
        return f"bz r{ins[1]}, {ins[2]}"
    if op == "call":
        return f"call {ins[1]}"
    if op == "cas":
        return f"cas [r{ins[1]}], r{ins[2]}, r{ins[3]} -> r{ins[4]}"
    if op == "corid":
        return f"corid r{ins[1]}"
    if op == "xbegin":
        return f"xbegin {ins[1]}"
    if op == "mark":
        return f"mark {ins[1]}"
    if op in ("ret", "eexit", "xend", "fence"):
        return op
    raise ProgramError(f"cannot emit {ins!r}")


def _parse_operand(tok):
    tok = tok.strip().rstrip(",")
    if tok.startswith("@"):
        body = tok[1:]
        if "+" in body:
            page, off = body.split("+", 1)
            return ("@", page, int(off, 0))
        return ("@", body, 0)
    return int(tok, 0)


def _parse_reg(tok):
    tok = tok.strip().rstrip(",")
    tok = tok.strip("[]")
    if not tok.startswith("r"):
        raise ProgramError(f"expected register, got {tok!r}")
    n = int(tok[1:])
    if not 0 <= n <= 7:
        raise ProgramError(f"register out of range: {tok}")
    return n


def parse_asm(text):
    """Parse the line-oriented assembly format into a Program."""
    program = Program()
    cur_func = None
    cur_page = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith(".data"):
            _, name, rights = line.split()
            cur_page = DataPage(name, rights)
            program.data_pages.append(cur_page)
            cur_func = None
            continue
        if line.startswith(".secret"):
            _, page, off = line.split()
            program.secret_slots.append((page, int(off, 0)))
            continue
        if line.startswith(".entry"):
            program.entry_points.append(line.split()[1])
            continue
        if line.startswith(".pageset"):
            parts = line.split()
            items = []
            for tok in parts[2:]:
                bits = tok.split(":")
                items.append(tuple(bits))
            program.page_sets[parts[1]] = PageSet(parts[1], tuple(items))
            continue
        if line.startswith(".func"):
            cur_func = []
            program.functions[line.split()[1]] = cur_func
            cur_page = None
            continue
        if cur_page is not None and "=" in line:
            off, val = line.split("=")
            cur_page.init[int(off, 0)] = int(val, 0)
            continue
        if cur_func is None:
            raise ProgramError(f"instruction outside .func: {line!r}")
        if line.endswith(":") and " " not in line:
            cur_func.append(("label", line[:-1]))
            continue
        cur_func.append(_parse_ins(line))
    validate_program(program)
    return program


def _parse_ins(line):
    parts = line.replace(",", " ").split()
    op = parts[0]
    if op == "li":
        return ("li", _parse_reg(parts[1]), _parse_operand(parts[2]))
    if op.endswith("i") and op[:-1] in ALU_OPS:
        return ("alui", op[:-1], _parse_reg(parts[1]), _parse_operand(parts[2]))
    if op in ALU_OPS:
        return ("alur", op, _parse_reg(parts[1]), _parse_reg(parts[2]))
    if op == "rd":
        return ("rd", _parse_reg(parts[1]), _parse_reg(parts[2]))
    if op == "wr":
        return ("wr", _parse_reg(parts[1]), _parse_reg(parts[2]))
    if op == "bz":
        return ("bz", _parse_reg(parts[1]), parts[2])
    if op == "call":
        return ("call", parts[1])
    if op == "cas":
        # cas [r1], r2, r3 -> r4
        toks = [t for t in parts[1:] if t != "->"]
        return ("cas", _parse_reg(toks[0]), _parse_reg(toks[1]),
                _parse_reg(toks[2]), _parse_reg(toks[3]))
    if op == "corid":
        return ("corid", _parse_reg(parts[1]))
    if op == "xbegin":
        return ("xbegin", parts[1])
    if op == "mark":
        return ("mark", parts[1])
    if op in ("ret", "eexit", "xend", "fence"):
        return (op,)
    raise ProgramError(f"unknown instruction {line!r}")


# ---------------------------------------------------------------------------
# Built-in scenarios


@dataclass
class Scenario:
    """An application program plus the secrets and targets the harness needs.

    secret values are tuples matching secret_slots; attack_targets holds
    symbolic page references the attacker strategies resolve after load.
    """

    name: str
    program: Program
    secret_pairs: list
    default_secret: tuple
    main_entry: str
    main_args: tuple = ()
    attack_targets: dict = field(default_factory=dict)


def _pad_to_page(n_before):
    """Instructions needed to reach the next page boundary."""
    rem = n_before % INSTR_PER_PAGE
    return 0 if rem == 0 else INSTR_PER_PAGE - rem


def wrap_plain(program):
    """Wrap each entry point in a call shim ending in an explicit eexit.

    Application bodies end in ret; the shim provides the frame that ret pops
    and is what an undefended build enters. Defense wrappers replace it.
    """
    prog = program.copy()
    runtime = set(prog.meta.get("runtime_funcs", ()))
    mapping = {}
    new_entries = []
    for e in prog.entry_points:
        w = f"__entry_{e}"
        prog.functions[w] = [Call(e), EExit()]
        runtime.add(w)
        mapping[e] = w
        new_entries.append(w)
    prog.entry_points = new_entries
    prog.meta["runtime_funcs"] = tuple(sorted(runtime))
    prog.meta["entry_map"] = mapping
    if prog.meta.get("main_entry") in mapping:
        prog.meta["main_entry"] = mapping[prog.meta["main_entry"]]
    prog.meta.setdefault("defense", "none")
    return prog


def scenario_genome(bits=1):
    """Mutation scan: one extra-page call per set secret bit.

    The set and clear branches execute the same instruction count; only the
    page touched differs, which is exactly the page-channel signal.
    """
    prog = Program()
    out_addr = Addr("gout", 0)

    main = [
        LoadImm(1, Addr("genome", 0)),
        Read(1, 1),                      # r1 = secret bits
    ]
    for i in range(bits):
        skip = f"clr{i}"
        done = f"done{i}"
        main += [
            Alu("mov", 2, 1),
            AluI("shr", 2, i),
            AluI("and", 2, 1),
            BranchIfZero(2, skip),
            Call("add_desc"),
            LoadImm(3, 0),
            BranchIfZero(3, done),
            Label(skip),
            Call("add_pad"),
            LoadImm(3, 0),
            BranchIfZero(3, done),
            Label(done),
        ]
    main += [LoadImm(0, 0), Ret()]

    # both leaf functions are the same size; only their page differs
    add_pad = [
        LoadImm(4, out_addr),
        LoadImm(5, 2),
        Write(4, 5),
        Ret(),
    ]
    add_desc = [
        LoadImm(4, out_addr),
        LoadImm(5, 1),
        Write(4, 5),
        Ret(),
    ]

    prog.functions["main"] = main
    prog.functions["add_pad"] = add_pad
    n = sum(1 for ins in main + add_pad if ins[0] != "label")
    pad = _pad_to_page(n)
    if pad:
        prog.functions["__align0"] = [Fence()] * pad
    prog.functions["add_desc"] = add_desc
    prog.functions["__align1"] = [Fence()] * _pad_to_page(len(add_desc))

    prog.data_pages = [DataPage("genome", "rw"), DataPage("gout", "rw")]
    prog.secret_slots = [("genome", 0)]
    prog.entry_points = ["main"]
    prog.page_sets["default"] = PageSet("default")
    validate_program(prog)
    pairs = [(  (0,), (1,) )] if bits == 1 else [((0,), ((1 << bits) - 1,)), ((0,), (1,))]
    return Scenario(
        name="genome",
        program=prog,
        secret_pairs=pairs,
        default_secret=(1,),
        main_entry="main",
        attack_targets={
            "evict": [("func", "add_desc")],
            "watch": [("func", "add_desc")],
        },
    )


def scenario_otp(reads=2):
    """Key-dependent data flow: read a key page, derive a pad, write it out.

    Control flow never depends on the key, so the body is tick-balanced for
    free; only page observations could leak, and only without a defense.
    """
    prog = Program()
    main = [
        LoadImm(1, Addr("key", 0)),
        Read(2, 1),
    ]
    for _ in range(reads - 1):
        main += [Read(3, 1), Alu("xor", 2, 3)]
    main += [
        AluI("xor", 2, 0x5A5A),
        LoadImm(4, Addr("oout", 0)),
        Write(4, 2),
        Alu("mov", 0, 2),
        Ret(),
    ]
    prog.functions["main"] = main
    prog.data_pages = [DataPage("key", "rw"), DataPage("oout", "rw")]
    prog.secret_slots = [("key", 0)]
    prog.entry_points = ["main"]
    prog.page_sets["default"] = PageSet("default")
    validate_program(prog)
    return Scenario(
        name="otp",
        program=prog,
        secret_pairs=[((0x1234,), (0xBEEF,)), ((0,), (0xFFFF,))],
        default_secret=(0x1234,),
        main_entry="main",
        attack_targets={
            "evict": [("data", "key")],
            "watch": [("data", "key"), ("data", "oout")],
        },
    )


def scenario_fib(n=10):
    """Recursive fib. Heavy on call/ret; the secret is data-flow only."""
    prog = Program()
    main = [
        LoadImm(5, Addr("locals", 4088)),  # r5 = software locals stack top
        LoadImm(1, Addr("fibsec", 0)),
        Read(2, 1),                        # touch the secret (data flow only)
        LoadImm(0, n),
        Call("fib"),
        LoadImm(4, Addr("fout", 0)),
        Write(4, 0),
        Ret(),
    ]
    fib = [
        Alu("mov", 1, 0),
        AluI("lt", 1, 2),
        BranchIfZero(1, "rec"),
        Ret(),                             # n < 2: result already in r0
        Label("rec"),
        Write(5, 0),                       # save n
        AluI("sub", 5, WORD),
        AluI("sub", 0, 1),
        Call("fib"),
        Write(5, 0),                       # save fib(n-1)
        AluI("sub", 5, WORD),
        Alu("mov", 1, 5),
        AluI("add", 1, 2 * WORD),
        Read(2, 1),                        # r2 = saved n
        AluI("sub", 2, 2),
        Alu("mov", 0, 2),
        Call("fib"),
        Alu("mov", 1, 5),
        AluI("add", 1, WORD),
        Read(3, 1),                        # r3 = saved fib(n-1)
        Alu("add", 0, 3),
        AluI("add", 5, 2 * WORD),
        Ret(),
    ]
    prog.functions["main"] = main
    prog.functions["fib"] = fib
    prog.data_pages = [
        DataPage("locals", "rw"),
        DataPage("fibsec", "rw"),
        DataPage("fout", "rw"),
    ]
    prog.secret_slots = [("fibsec", 0)]
    prog.entry_points = ["main"]
    prog.page_sets["default"] = PageSet("default")
    validate_program(prog)
    return Scenario(
        name=f"fib{n}",
        program=prog,
        secret_pairs=[((0,), (1,))],
        default_secret=(0,),
        main_entry="main",
        attack_targets={
            "evict": [("data", "fibsec")],
            "watch": [("data", "fibsec"), ("data", "locals")],
        },
    )


def scenario_straightline(n=200):
    """Fixed-length body; the model-check harnesses interrupt it everywhere."""
    prog = Program()
    body = [
        LoadImm(1, Addr("sdata", 0)),
        Read(2, 1),
    ]
    k = 0
    while len(body) < n - 3:
        body.append(AluI("add", 2, k & 0xFF))
        k += 1
    body += [
        LoadImm(3, Addr("sout", 0)),
        Write(3, 2),
        Ret(),
    ]
    prog.functions["main"] = body
    prog.data_pages = [DataPage("sdata", "rw"), DataPage("sout", "rw")]
    prog.secret_slots = [("sdata", 0)]
    prog.entry_points = ["main"]
    prog.page_sets["default"] = PageSet("default")
    validate_program(prog)
    return Scenario(
        name=f"straightline{n}",
        program=prog,
        secret_pairs=[((0,), (7,))],
        default_secret=(0,),
        main_entry="main",
        attack_targets={
            "evict": [("data", "sdata")],
            "watch": [("data", "sdata")],
        },
    )


def scenario_tlbfill(rw_pages=325, body_lines=170, readonly_touch=False):
    """Large-preload stand-in: many rw data pages plus a line-hungry body.

    With write-touched preload the transaction write set is rw_pages +
    body_lines lines and overflows the default capacity; the documented
    fallback touches the data pages read-only and fits.
    """
    prog = Program()
    main = [
        LoadImm(1, Addr("scratch0", 0)),
        LoadImm(2, body_lines),
        Label("loop"),
        Write(1, 2),
        AluI("add", 1, LINE),
        AluI("sub", 2, 1),
        Alu("mov", 3, 2),
        BranchIfZero(3, "end"),
        LoadImm(4, 0),
        BranchIfZero(4, "loop"),
        Label("end"),
        LoadImm(0, 0),
        Ret(),
    ]
    prog.functions["main"] = main
    scratch_pages = (body_lines * LINE + PAGE - 1) // PAGE
    for i in range(scratch_pages):
        prog.data_pages.append(DataPage(f"scratch{i}", "rw"))
    for i in range(rw_pages):
        prog.data_pages.append(DataPage(f"d{i:03d}", "rw"))
    prog.data_pages.append(DataPage("tsec", "rw"))
    prog.secret_slots = [("tsec", 0)]
    prog.entry_points = ["main"]
    touch = "ro" if readonly_touch else "rw"
    items = [("func", "main")]
    items += [("data", f"scratch{i}") for i in range(scratch_pages)]
    items += [("data", f"d{i:03d}", touch) for i in range(rw_pages)]
    items += [("stack",), ("runtime",)]
    prog.page_sets["default"] = PageSet("default", tuple(items))
    validate_program(prog)
    return Scenario(
        name="tlbfill",
        program=prog,
        secret_pairs=[((0,), (1,))],
        default_secret=(0,),
        main_entry="main",
        attack_targets={
            "evict": [("data", "d000")],
            "watch": [("data", "d000")],
        },
    )


SCENARIOS = {
    "genome": scenario_genome,
    "otp": scenario_otp,
    "fib": scenario_fib,
    "straightline": scenario_straightline,
    "tlbfill": scenario_tlbfill,
}


def build_scenario(name, **kwargs):
    if name.startswith("fib") and name != "fib" and name[3:].isdigit():
        return scenario_fib(int(name[3:]))
    if name not in SCENARIOS:
        raise ProgramError(f"unknown scenario {name!r}")
    return SCENARIOS[name](**kwargs)
