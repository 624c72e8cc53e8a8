"""Restricted-symbol constraint solving.

screen() checks a fixed-width encoding for banned byte values.  The addend
search solves a + b = value per byte with explicit carry states on a stack,
trying the no-overflow branch first and the overflow branch (a >= 128 +
floor(d/2)) second; subtraction and xor operands are found the same way.
Absence of a solution is reported as None, never as an error.
"""

WIDTHS = (1, 2, 4, 8)


def screen(value, width_bytes, bad):
    """True iff no byte of the width-sized encoding is restricted."""
    if width_bytes not in WIDTHS:
        raise ValueError(f"unsupported width {width_bytes}")
    value &= (1 << (8 * width_bytes)) - 1
    for _ in range(width_bytes):
        if value & 0xFF in bad:
            return False
        value >>= 8
    return True


def screen_bytes(data, bad):
    return not any(b in bad for b in data)


def significant_width(value):
    """Bytes needed to encode value; at least one."""
    return max(1, (value.bit_length() + 7) // 8)


def screen_address(addr, word_bytes, bad, mode="full"):
    """Screen a gadget address as it will appear inside the payload.

    'full' checks every byte of the emitted word, which is how copy-style
    sinks see it; 'significant' checks only the bytes the address needs,
    modeling length-limited copies.
    """
    if mode == "significant":
        return screen(addr, min(word_bytes, _pow2_width(significant_width(addr))), bad)
    return screen(addr, word_bytes, bad)


def _pow2_width(n):
    for w in WIDTHS:
        if n <= w:
            return w
    return 8


def find_addends(value, width_bytes, bad):
    """Addends (lv, rv) with lv + rv = value mod 2**(8*width), both screened.

    Explicit-stack search over (byte index, partial lv, partial rv, carry).
    Returns None when the state space is exhausted.
    """
    if width_bytes not in WIDTHS:
        raise ValueError(f"unsupported width {width_bytes}")
    value &= (1 << (8 * width_bytes)) - 1
    stack = [(0, 0, 0, 0)]
    while stack:
        i, lv0, rv0, carry = stack.pop()
        c = (value >> (8 * i)) & 255
        d = (256 + c - carry) % 256
        # solve a + b + carry = c without overflowing this byte
        if carry == 0 or c != 0:
            for a in range(0, d // 2 + 1):
                b = (d - a) % 256
                if a not in bad and b not in bad:
                    lv = lv0 | (a << (8 * i))
                    rv = rv0 | (b << (8 * i))
                    if i + 1 == width_bytes:
                        return lv, rv
                    stack.append((i + 1, lv, rv, 0))
                    break
        # solve with overflow into the next byte
        if carry != 0 or c != 255:
            la = d // 2 if c != 0 else 0
            for a in range(128 + la, 256):
                b = (256 + d - a) % 256
                if a not in bad and b not in bad:
                    lv = lv0 | (a << (8 * i))
                    rv = rv0 | (b << (8 * i))
                    if i + 1 == width_bytes:
                        return lv, rv
                    stack.append((i + 1, lv, rv, 1))
                    break
    return None


def _find_sub_operands(value, width_bytes, bad):
    """(lv, rv) with lv - rv = value mod 2**(8*width): rv + value = lv per byte."""
    value &= (1 << (8 * width_bytes)) - 1
    stack = [(0, 0, 0, 0)]
    while stack:
        i, lv0, rv0, carry = stack.pop()
        v = (value >> (8 * i)) & 255
        for target_carry in (1, 0):  # matching the adder: last pushed explored first
            found = None
            for b in range(256):
                if b in bad:
                    continue
                total = v + b + carry
                a = total & 255
                if (total >> 8) != target_carry or a in bad:
                    continue
                found = (a, b)
                break
            if found is None:
                continue
            a, b = found
            lv = lv0 | (a << (8 * i))
            rv = rv0 | (b << (8 * i))
            if i + 1 == width_bytes:
                return lv, rv
            stack.append((i + 1, lv, rv, target_carry))
    return None


def _find_xor_operands(value, width_bytes, bad):
    """Per-byte independent split: a ^ b = value byte, both screened."""
    value &= (1 << (8 * width_bytes)) - 1
    lv = rv = 0
    for i in range(width_bytes):
        v = (value >> (8 * i)) & 255
        for a in range(256):
            if a in bad or (a ^ v) in bad:
                continue
            lv |= a << (8 * i)
            rv |= (a ^ v) << (8 * i)
            break
        else:
            return None
    return lv, rv


def find_operands(value, width_bytes, bad, op):
    """Operands (lv, rv) with op(lv, rv) = value mod width, both screened."""
    if op == "add":
        return find_addends(value, width_bytes, bad)
    if op == "sub":
        return _find_sub_operands(value, width_bytes, bad)
    if op == "xor":
        return _find_xor_operands(value, width_bytes, bad)
    return None
