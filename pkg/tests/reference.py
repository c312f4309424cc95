"""Independent reference interpreter for the toy instruction set.

This is the oracle the test suite checks the platform against. It executes
programs directly — no paging, no TLB, no enclave transitions, no
transactions — with its own label resolution, its own ALU, and a flat
symbolic memory. Anything both implementations must agree on (results,
instruction counts, dynamic call logs) is computed here from the program
text alone.
"""

from __future__ import annotations

MAX_STEPS = 5_000_000


class ReferenceError(Exception):
    pass


def _alu(op, a, b):
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mov":
        return b
    if op == "and":
        return a & b
    if op == "or":
        return a | b
    if op == "xor":
        return a ^ b
    if op == "mul":
        return a * b
    if op == "shl":
        return a << (b & 63)
    if op == "shr":
        return (a & ((1 << 64) - 1)) >> (b & 63)
    if op == "eq":
        return 1 if a == b else 0
    if op == "lt":
        return 1 if a < b else 0
    raise ReferenceError(f"unknown alu op {op!r}")


def _strip(body):
    """Own label resolution: labels bind to the next real instruction."""
    instrs, labels = [], {}
    for ins in body:
        if ins[0] == "label":
            labels[ins[1]] = len(instrs)
        else:
            instrs.append(ins)
    return instrs, labels


class Reference:
    """Direct interpreter over a Program; single thread, flat memory."""

    def __init__(self, program, secret=()):
        self.program = program
        self.funcs = {}
        for name, body in program.functions.items():
            self.funcs[name] = _strip(body)
        self.sizes = {n: len(b[0]) for n, b in self.funcs.items()}
        self.page_base = {}
        base = 1 << 20
        for p in program.data_pages:
            self.page_base[p.name] = base
            base += 1 << 13
        self.memory = {}
        for p in program.data_pages:
            for off, val in p.init.items():
                self.memory[self.page_base[p.name] + off] = val
        for (pname, off), val in zip(program.secret_slots, secret):
            self.memory[self.page_base[pname] + off] = val
        self.stack_top = base + (1 << 16)
        self.call_log = []
        self.icount = 0

    def _operand(self, v):
        if isinstance(v, tuple) and v and v[0] == "@":
            return self.page_base[v[1]] + v[2]
        return v

    def run(self, entry, args=()):
        regs = [0] * 8
        for i, a in enumerate(args):
            regs[i] = a
        rsp = self.stack_top
        frames = []  # (func_name, return_index)
        code, labels = self.funcs[entry]
        fname = entry
        self.call_log.append(entry)
        pc = 0
        for _ in range(MAX_STEPS):
            if pc >= len(code):
                raise ReferenceError(f"fell off the end of {fname}")
            ins = code[pc]
            op = ins[0]
            self.icount += 1
            pc += 1
            if op == "li":
                regs[ins[1]] = self._operand(ins[2])
            elif op == "alui":
                regs[ins[2]] = _alu(ins[1], regs[ins[2]],
                                    self._operand(ins[3]))
            elif op == "alur":
                regs[ins[2]] = _alu(ins[1], regs[ins[2]], regs[ins[3]])
            elif op == "rd":
                regs[ins[1]] = self.memory.get(regs[ins[2]], 0)
            elif op == "wr":
                self.memory[regs[ins[1]]] = regs[ins[2]]
            elif op == "bz":
                if regs[ins[1]] == 0:
                    pc = labels[ins[2]]
            elif op == "call":
                frames.append((fname, pc, code, labels))
                rsp -= 8
                fname = ins[1]
                code, labels = self.funcs[fname]
                self.call_log.append(fname)
                pc = 0
            elif op == "ret":
                if not frames:
                    return regs[0]
                fname, pc, code, labels = frames.pop()
                rsp += 8
            elif op == "eexit":
                return regs[0]
            elif op in ("fence", "xend"):
                pass
            elif op == "xbegin":
                pass  # no transactions here: straight-line semantics
            elif op == "mark":
                pass  # preload marker is a platform affair
            elif op == "cas":
                addr = regs[ins[1]]
                cur = self.memory.get(addr, 0)
                if cur == regs[ins[2]]:
                    self.memory[addr] = regs[ins[3]]
                    regs[ins[4]] = 0
                else:
                    regs[ins[4]] = cur
            elif op == "corid":
                regs[ins[1]] = 0
            else:
                raise ReferenceError(f"reference cannot execute {ins!r}")
        raise ReferenceError("reference step budget exhausted")

    def cell(self, page_name, off=0):
        return self.memory.get(self.page_base[page_name] + off, 0)


def run_reference(scenario, secret=None):
    """Execute a scenario's raw program; returns (Reference, result)."""
    ref = Reference(scenario.program,
                    secret if secret is not None else scenario.default_secret)
    result = ref.run(scenario.main_entry, scenario.main_args)
    return ref, result


def txsplit_commit_oracle(call_log, sizes, init_cntr, func_skp,
                          runtime_names=()):
    """Commit count the counter-debit rule implies for a dynamic call log.

    Every entry into an instrumented function debits the counter by that
    function's static size; a negative counter forces one commit and a
    reset. Functions below the size threshold (and runtime helpers) are
    not instrumented and debit nothing.
    """
    counter = init_cntr
    commits = 0
    mass = 0
    for fname in call_log:
        if fname in runtime_names:
            continue
        size = sizes[fname]
        if size < func_skp:
            continue
        mass += size
        counter -= size
        if counter < 0:
            commits += 1
            counter = init_cntr
    return commits, mass


# frozen expected values ------------------------------------------------------

FIB = {n: v for n, v in zip(
    range(26),
    [0, 1, 1, 2, 3, 5, 8, 13, 21, 34, 55, 89, 144, 233, 377, 610, 987,
     1597, 2584, 4181, 6765, 10946, 17711, 28657, 46368, 75025])}
