//! Deterministic in-memory fixtures shared by the benchmarks.

use bytes::Bytes;

/// Newline-separated lines of 80 bases, `size` bytes in total.
pub fn dna_text(size: usize) -> Bytes {
    const BASES: &[u8; 4] = b"ACGT";
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        if out.len() % 81 == 80 || out.len() + 1 == size {
            out.push(b'\n');
            continue;
        }
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        out.push(BASES[(state >> 62) as usize]);
    }
    Bytes::from(out)
}

/// `n` tab-separated alignment-like records keyed by one of 23 chromosomes.
pub fn alignment_text(n: usize) -> Bytes {
    let mut out = String::with_capacity(n * 32);
    for i in 0..n {
        let chr = i.wrapping_mul(7919) % 23;
        let name = if chr == 22 {
            "chrX".to_string()
        } else {
            format!("chr{}", chr + 1)
        };
        out.push_str(&format!("read{i}\t0\t{name}\t{}\n", i * 37 % 1_000_000));
    }
    Bytes::from(out)
}

/// `n` SDF-like records separated by `\n$$$$\n`.
pub fn sdf_text(n: usize) -> Bytes {
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&format!(
            "MOL{i:08}\n  bench\n\n  2  1  0  0  0  0            999 V2000\nM  END\n> <score>\n{}\n\n$$$$\n",
            i * 2_654_435_761 % 1_000_003
        ));
    }
    Bytes::from(out)
}
