//! Seeded gradient noise and its fractal sum.

use rand::seq::SliceRandom;

use crate::rng;

#[derive(Clone, Debug)]
pub struct Perlin {
    perm: [u8; 512],
}

const GRAD: [[f32; 3]; 12] = [
    [1.0, 1.0, 0.0],
    [-1.0, 1.0, 0.0],
    [1.0, -1.0, 0.0],
    [-1.0, -1.0, 0.0],
    [1.0, 0.0, 1.0],
    [-1.0, 0.0, 1.0],
    [1.0, 0.0, -1.0],
    [-1.0, 0.0, -1.0],
    [0.0, 1.0, 1.0],
    [0.0, -1.0, 1.0],
    [0.0, 1.0, -1.0],
    [0.0, -1.0, -1.0],
];

#[inline]
fn fade(t: f32) -> f32 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

impl Perlin {
    pub fn new(seed: u64) -> Self {
        let mut p: Vec<u8> = (0..=255u8).collect();
        p.shuffle(&mut rng::stream(&[seed, 0x5045_524C]));
        let mut perm = [0u8; 512];
        for i in 0..512 {
            perm[i] = p[i & 255];
        }
        Self { perm }
    }

    #[inline]
    fn grad(&self, h: u8, x: f32, y: f32, z: f32) -> f32 {
        let g = GRAD[(h % 12) as usize];
        g[0] * x + g[1] * y + g[2] * z
    }

    /// Noise value in roughly `[-1, 1]`; zero on the integer lattice.
    pub fn noise(&self, x: f32, y: f32, z: f32) -> f32 {
        let (fx, fy, fz) = (x.floor(), y.floor(), z.floor());
        let xi = (fx as i64 & 255) as usize;
        let yi = (fy as i64 & 255) as usize;
        let zi = (fz as i64 & 255) as usize;
        let (x, y, z) = (x - fx, y - fy, z - fz);
        let (u, v, w) = (fade(x), fade(y), fade(z));
        let p = &self.perm;
        let a = p[xi] as usize + yi;
        let aa = p[a] as usize + zi;
        let ab = p[a + 1] as usize + zi;
        let b = p[xi + 1] as usize + yi;
        let ba = p[b] as usize + zi;
        let bb = p[b + 1] as usize + zi;
        let x1 = lerp(self.grad(p[aa], x, y, z), self.grad(p[ba], x - 1.0, y, z), u);
        let x2 = lerp(
            self.grad(p[ab], x, y - 1.0, z),
            self.grad(p[bb], x - 1.0, y - 1.0, z),
            u,
        );
        let y1 = lerp(x1, x2, v);
        let x3 = lerp(
            self.grad(p[aa + 1], x, y, z - 1.0),
            self.grad(p[ba + 1], x - 1.0, y, z - 1.0),
            u,
        );
        let x4 = lerp(
            self.grad(p[ab + 1], x, y - 1.0, z - 1.0),
            self.grad(p[bb + 1], x - 1.0, y - 1.0, z - 1.0),
            u,
        );
        let y2 = lerp(x3, x4, v);
        lerp(y1, y2, w)
    }

    /// Fractal sum normalized by the total octave weight.
    pub fn fbm(&self, p: [f32; 3], octaves: u32, gain: f32, lacunarity: f32) -> f32 {
        let (mut amp, mut freq, mut sum, mut norm) = (1.0f32, 1.0f32, 0.0f32, 0.0f32);
        for o in 0..octaves {
            let off = 17.31 * o as f32;
            sum += amp * self.noise(p[0] * freq + off, p[1] * freq - off, p[2] * freq + 0.5 * off);
            norm += amp;
            amp *= gain;
            freq *= lacunarity;
        }
        if norm > 0.0 {
            sum / norm
        } else {
            0.0
        }
    }
}
