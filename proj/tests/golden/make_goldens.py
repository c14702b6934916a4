#!/usr/bin/env python3
"""Regenerate the feature-extraction reference fixtures.

Writes deterministic 16 kHz mono PCM16 test signals plus the expected MFCC
matrix for each, computed with an independent numpy/scipy pipeline:

    reflect pad n_fft/2 -> periodic Hann -> |rfft|^2 -> mel filterbank
    (triangles spaced on mel = 2595*log10(1 + f/700), area-normalized by
    2/(hi_hz - lo_hz)) -> log10 with floor 1e-10 -> orthonormal DCT-II,
    keep the first n_mfcc rows.

The C++ extractor is tested against these files; the fixtures are committed
so the suite never depends on python at test time. Run from the repo root:

    python3 tests/golden/make_goldens.py
"""

import json
import pathlib
import struct

import numpy as np
import scipy.fft

SR = 16000
N_FFT = 2048
HOP = 512
N_MELS = 128
N_MFCC = 20
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-10

HERE = pathlib.Path(__file__).resolve().parent


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank():
    n_bins = N_FFT // 2 + 1
    fftfreqs = np.linspace(0.0, SR / 2.0, n_bins)
    mel_pts = mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), N_MELS + 2))
    fdiff = np.diff(mel_pts)
    ramps = mel_pts[:, None] - fftfreqs[None, :]
    weights = np.zeros((N_MELS, n_bins))
    for m in range(N_MELS):
        lower = -ramps[m] / fdiff[m]
        upper = ramps[m + 2] / fdiff[m + 1]
        weights[m] = np.maximum(0.0, np.minimum(lower, upper))
    enorm = 2.0 / (mel_pts[2 : N_MELS + 2] - mel_pts[:N_MELS])
    return weights * enorm[:, None]


def mfcc_ref(x):
    x = np.asarray(x, dtype=np.float64)
    pad = N_FFT // 2
    assert len(x) >= pad + 1
    padded = np.pad(x, pad, mode="reflect")
    n_frames = 1 + len(x) // HOP
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(N_FFT) / N_FFT)
    frames = np.stack([padded[t * HOP : t * HOP + N_FFT] for t in range(n_frames)])
    spec = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    mel = mel_filterbank() @ spec.T
    logmel = np.log10(np.maximum(mel, LOG_FLOOR))
    cep = scipy.fft.dct(logmel, type=2, axis=0, norm="ortho")
    return cep[:N_MFCC]


def write_wav(path, x):
    pcm = np.clip(np.rint(np.asarray(x) * 32767.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(data)))
        f.write(b"WAVEfmt ")
        f.write(struct.pack("<IHHIIHH", 16, 1, 1, SR, SR * 2, 2, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(data)))
        f.write(data)
    return pcm.astype(np.float64) / 32768.0


def t_axis(seconds):
    return np.arange(int(round(seconds * SR))) / SR


def signals():
    rng = np.random.default_rng(20260814)
    t2 = t_axis(2.0)
    t5 = t_axis(5.0)
    out = []

    def add(name, desc, x):
        out.append((name, desc, x))

    add("silence_5s", "all zeros, 5 s", np.zeros_like(t5))
    add("sine_440_unit_5s", "440 Hz sine, amplitude 1.0, 5 s", np.sin(2 * np.pi * 440 * t5))
    add("sine_440_half", "440 Hz sine, amplitude 0.5", 0.5 * np.sin(2 * np.pi * 440 * t2))
    add("sine_1000", "1 kHz sine, amplitude 0.8", 0.8 * np.sin(2 * np.pi * 1000 * t2))
    add("sine_3000_quarter", "3 kHz sine, amplitude 0.25", 0.25 * np.sin(2 * np.pi * 3000 * t2))
    add("sine_7900", "7.9 kHz sine near the analysis band edge", 0.6 * np.sin(2 * np.pi * 7900 * t2))
    add("sine_sum", "300 + 600 + 1200 Hz sum", (np.sin(2 * np.pi * 300 * t2) + np.sin(2 * np.pi * 600 * t2) + np.sin(2 * np.pi * 1200 * t2)) / 3.0)
    add("chirp_lin_100_4000", "linear chirp 100 to 4000 Hz", 0.7 * np.sin(2 * np.pi * (100 * t2 + (4000 - 100) / (2 * 2.0) * t2**2)))
    add("chirp_lin_50_7500", "linear chirp 50 to 7500 Hz", 0.7 * np.sin(2 * np.pi * (50 * t2 + (7500 - 50) / (2 * 2.0) * t2**2)))
    add("chirp_exp_100_6000", "exponential chirp 100 to 6000 Hz", 0.7 * np.sin(2 * np.pi * 100 * 2.0 / np.log(60.0) * (np.exp(t2 / 2.0 * np.log(60.0)) - 1.0)))
    add("noise_full", "white noise, amplitude 0.3", 0.3 * rng.standard_normal(len(t2)))
    add("noise_burst_mid", "noise burst in the middle 0.5 s", np.where((t2 >= 0.75) & (t2 < 1.25), 0.5 * rng.standard_normal(len(t2)), 0.0))
    add("noise_quiet", "white noise, amplitude 1e-3", 1e-3 * rng.standard_normal(len(t2)))
    add("am_1000_2hz", "1 kHz carrier, 2 Hz amplitude modulation", 0.5 * (1 + 0.9 * np.sin(2 * np.pi * 2 * t2)) * np.sin(2 * np.pi * 1000 * t2))
    add("am_1000_8hz", "1 kHz carrier, 8 Hz amplitude modulation", 0.5 * (1 + 0.9 * np.sin(2 * np.pi * 8 * t2)) * np.sin(2 * np.pi * 1000 * t2))
    add("impulse_train_100", "100 Hz impulse train", np.where(np.arange(len(t2)) % 160 == 0, 0.9, 0.0))
    add("impulse_center", "single impulse at the midpoint", np.where(np.arange(len(t2)) == len(t2) // 2, 1.0, 0.0))
    add("dc_half", "constant 0.5", np.full(len(t2), 0.5))
    add("square_220", "220 Hz square wave, amplitude 0.4", 0.4 * np.sign(np.sin(2 * np.pi * 220 * t2)))
    add("sine_440_ramp", "440 Hz sine with 0 to 1 amplitude ramp", (t2 / 2.0) * np.sin(2 * np.pi * 440 * t2))

    assert len(out) == 20
    return out


def main():
    wav_dir = HERE / "wav"
    mfcc_dir = HERE / "mfcc"
    wav_dir.mkdir(exist_ok=True)
    mfcc_dir.mkdir(exist_ok=True)

    fb = mel_filterbank()
    fb.astype("<f8").tofile(HERE / "melfb_default.f64")

    manifest = {
        "sample_rate": SR,
        "n_fft": N_FFT,
        "hop": HOP,
        "n_mels": N_MELS,
        "n_mfcc": N_MFCC,
        "fmin": FMIN,
        "fmax": FMAX,
        "log_floor": LOG_FLOOR,
        "filterbank": "melfb_default.f64",
        "signals": [],
    }

    for name, desc, x in signals():
        decoded = write_wav(wav_dir / f"{name}.wav", x)
        ref = mfcc_ref(decoded)
        ref.astype("<f8").tofile(mfcc_dir / f"{name}.f64")
        manifest["signals"].append(
            {
                "id": name,
                "description": desc,
                "wav": f"wav/{name}.wav",
                "mfcc": f"mfcc/{name}.f64",
                "samples": len(decoded),
                "n_mfcc": int(ref.shape[0]),
                "n_frames": int(ref.shape[1]),
            }
        )
        print(f"{name}: {ref.shape[0]}x{ref.shape[1]}  range [{ref.min():.3f}, {ref.max():.3f}]")

    with open(HERE / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    main()
