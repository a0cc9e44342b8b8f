//! Two-dimensional Sobol sequence in Gray-code order.

const BITS: u32 = 32;

fn directions() -> [[u32; BITS as usize]; 2] {
    let mut v = [[0u32; BITS as usize]; 2];
    // first coordinate: van der Corput in base 2
    // second coordinate: polynomial x + 1 with m_1 = 1, m_k = 2 m_{k-1} ^ m_{k-1}
    let mut m = 1u32;
    for k in 0..BITS as usize {
        v[0][k] = 1 << (BITS as usize - 1 - k);
        if k > 0 {
            m = (m << 1) ^ m;
        }
        v[1][k] = m << (BITS as usize - 1 - k);
    }
    v
}

/// Points `skip .. skip + n` of the sequence; index 0 is the origin.
pub fn sobol2d(n: usize, skip: usize) -> Vec<[f64; 2]> {
    let v = directions();
    let scale = 1.0 / (1u64 << BITS) as f64;
    (skip..skip + n)
        .map(|i| {
            let gray = (i ^ (i >> 1)) as u64;
            let mut p = [0u32; 2];
            for bit in (0..BITS as usize).filter(|&k| gray >> k & 1 == 1) {
                p[0] ^= v[0][bit];
                p[1] ^= v[1][bit];
            }
            [p[0] as f64 * scale, p[1] as f64 * scale]
        })
        .collect()
}
