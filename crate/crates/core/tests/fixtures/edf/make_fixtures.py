#!/usr/bin/env python3
"""Writes the EDF fixture corpus byte by byte and records what a reader must see.

The expected values in oracle.json are computed here, independently of the Rust reader:
header fields as text, scaling coefficients as IEEE-754 double hex, and every physical
sample as the hex of its float32 bit pattern.
"""
import json
import os
import struct

HERE = os.path.dirname(os.path.abspath(__file__))


def left(text, width):
    b = text.encode("ascii")
    assert len(b) <= width, text
    return b + b" " * (width - len(b))


def right(text, width):
    b = text.encode("ascii")
    assert len(b) <= width, text
    return b" " * (width - len(b)) + b


def f32_hex(x):
    return struct.pack(">f", x).hex()


def f64_hex(x):
    return struct.pack(">d", x).hex()


def tal_bytes(start, events, size):
    raw = b"+%s\x14\x14\x00" % str(start).encode()
    for onset, duration, label in events:
        stamp = b"+%s" % str(onset).encode()
        if duration is not None:
            stamp += b"\x15" + str(duration).encode()
        raw += stamp + b"\x14" + label.encode() + b"\x14\x00"
    assert len(raw) <= size, (raw, size)
    return raw + b"\x00" * (size - len(raw))


def build(signals, records, duration, reserved="", count_text=None, ns_text=None):
    """signals: dicts with label, pmin, pmax, dmin, dmax, spr and either samples
    (records * spr ints) or tal (list per record of (onset, duration, label))."""
    ns = len(signals)
    h = b""
    h += left("0", 8)
    h += left("X M 01-JAN-1970 fixture", 80)
    h += left("Startdate 01-JAN-2009 X X X", 80)
    h += left("01.01.09", 8)
    h += left("12.00.00", 8)
    h += left(str(256 * (ns + 1)), 8)
    h += left(reserved, 44)
    h += left(count_text if count_text is not None else str(records), 8)
    h += left(duration, 8)
    h += right(ns_text if ns_text is not None else str(ns), 4)
    assert len(h) == 256
    h += b"".join(left(s["label"], 16) for s in signals)
    h += b"".join(left("AgAgCl electrode" if "tal" not in s else "", 80) for s in signals)
    h += b"".join(left("uV" if "tal" not in s else "", 8) for s in signals)
    h += b"".join(left(s["pmin"], 8) for s in signals)
    h += b"".join(left(s["pmax"], 8) for s in signals)
    h += b"".join(left(str(s["dmin"]), 8) for s in signals)
    h += b"".join(left(str(s["dmax"]), 8) for s in signals)
    h += b"".join(left("HP:0.1Hz LP:75Hz" if "tal" not in s else "", 80) for s in signals)
    h += b"".join(left(str(s["spr"]), 8) for s in signals)
    h += b"".join(left("", 32) for s in signals)
    assert len(h) == 256 * (ns + 1)
    data = b""
    for r in range(records):
        for s in signals:
            n = s["spr"]
            if "tal" in s:
                data += tal_bytes(r * float(duration), s["tal"][r], 2 * n)
            else:
                data += struct.pack("<%dh" % n, *s["samples"][r * n:(r + 1) * n])
    return h + data


def scaling(s):
    pmin, pmax = float(s["pmin"]), float(s["pmax"])
    gain = (pmax - pmin) / float(s["dmax"] - s["dmin"])
    offset = pmin - gain * float(s["dmin"])
    return gain, offset


def expected(signals, records, duration, reserved="", count=None):
    ordinary = [s for s in signals if "tal" not in s]
    spr = ordinary[0]["spr"] if ordinary else 0
    chans = []
    for s in ordinary:
        gain, offset = scaling(s)
        chans.append("".join(f32_hex(gain * d + offset) for d in s["samples"]))
    events = []
    for s in signals:
        if "tal" in s:
            for rec in s["tal"]:
                for onset, _dur, label in rec:
                    events.append([onset, label])
    return {
        "version": "0",
        "patient": "X M 01-JAN-1970 fixture",
        "recording": "Startdate 01-JAN-2009 X X X",
        "start_date": "01.01.09",
        "start_time": "12.00.00",
        "header_bytes": 256 * (len(signals) + 1),
        "reserved": reserved,
        "record_count": records if count is None else count,
        "record_duration": float(duration),
        "signal_count": len(signals),
        "signals": [
            {
                "label": s["label"],
                "physical_min": float(s["pmin"]),
                "physical_max": float(s["pmax"]),
                "digital_min": s["dmin"],
                "digital_max": s["dmax"],
                "samples_per_record": s["spr"],
                "gain_hex": f64_hex(scaling(s)[0]),
                "offset_hex": f64_hex(scaling(s)[1]),
            }
            for s in signals
        ],
        "channel_labels": [s["label"] for s in ordinary],
        "fs": spr / float(duration) if spr else 1.0,
        "samples": records * spr,
        "samples_hex": chans,
        "annotations": events,
    }


def ramp(n, lo, hi, seed):
    out = []
    x = seed
    for i in range(n):
        x = (x * 1103515245 + 12345) % (1 << 31)
        out.append(lo + x % (hi - lo + 1))
    out[0], out[-1] = lo, hi
    return out


def main():
    oracle = {}

    def ok(name, signals, records, duration, **kw):
        count = kw.pop("count", None)
        buf = build(signals, records, duration, **kw)
        with open(os.path.join(HERE, name), "wb") as f:
            f.write(buf)
        oracle[name] = {"ok": expected(signals, records, duration, kw.get("reserved", ""), count)}
        return buf

    def bad(name, buf, kind, offset):
        with open(os.path.join(HERE, name), "wb") as f:
            f.write(buf)
        oracle[name] = {"error": {"kind": kind, "offset": offset}}

    two = [
        {"label": "Fc5.", "pmin": "-100", "pmax": "100", "dmin": -2048, "dmax": 2047, "spr": 8,
         "samples": ramp(24, -2048, 2047, 1)},
        {"label": "C3..", "pmin": "-1", "pmax": "1", "dmin": -32768, "dmax": 32767, "spr": 8,
         "samples": [0, -32768, 32767, 1, -1, 100, -100, 0] + ramp(16, -32768, 32767, 2)},
    ]
    base = ok("two_signals.edf", two, 3, "1")

    plus = [
        {"label": "Cz..", "pmin": "-8092", "pmax": "8092", "dmin": -8092, "dmax": 8092, "spr": 10,
         "samples": ramp(40, -8092, 8092, 3)},
        {"label": "Pz..", "pmin": "-500.5", "pmax": "499.5", "dmin": -32768, "dmax": 32767, "spr": 10,
         "samples": ramp(40, -32768, 32767, 4)},
        {"label": "EDF Annotations", "pmin": "-1", "pmax": "1", "dmin": -32768, "dmax": 32767, "spr": 30,
         "tal": [[(0.0, 0.5, "T0")], [(0.5, 0.5, "T1")], [], [(1.5, None, "T2"), (1.75, 0.25, "T0")]]},
    ]
    ok("edfplus_events.edf", plus, 4, "0.5", reserved="EDF+C")

    quiet = [
        {"label": "Oz..", "pmin": "-10", "pmax": "10", "dmin": -100, "dmax": 100, "spr": 4,
         "samples": [-100, -50, 50, 100, 0, 1, -1, 7]},
        {"label": "EDF Annotations", "pmin": "-1", "pmax": "1", "dmin": -32768, "dmax": 32767, "spr": 8,
         "tal": [[], []]},
    ]
    ok("empty_annotations.edf", quiet, 2, "2", reserved="EDF+C")

    ok("unknown_count.edf", [dict(two[0], samples=ramp(16, -2048, 2047, 5))], 2, "1",
       count_text="-1", count=-1)

    bad("truncated_header.edf", base[:200], "Truncated", 200)
    bad("non_numeric_count.edf", base[:236] + left("abc", 8) + base[244:], "NonNumeric", 236)
    bad("record_size.edf", base[:-2], "RecordSize", 768)
    bad("bdf_width.bdf", b"\xffBIOSEMI" + base[8:], "UnsupportedWidth", 0)
    wide = [dict(two[0], dmin=-8388608, dmax=8388607)]
    wide_buf = build(wide, 3, "1")
    # digital minimum block of a 1-signal file: 256 + 16 + 80 + 8 + 8 + 8
    bad("wide_digital.edf", wide_buf, "UnsupportedWidth", 376)

    with open(os.path.join(HERE, "oracle.json"), "w") as f:
        json.dump(oracle, f, indent=1, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
