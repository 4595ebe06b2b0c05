//! Counter-based deterministic random number generation.
//!
//! Every random value in this crate is a pure function of a 64-bit seed and a
//! 64-bit counter, with no generator state. That makes generation
//! order-independent: cell (i, j) of a random matrix can be produced by any
//! worker, in any order, and the result is always the same bytes.
//!
//! The construction, normative for all artifacts this crate writes:
//!
//! - `mix(x)` is the splitmix64 finalizer (Steele, Lea & Flood 2014).
//! - The raw word at position `c` of stream `seed` is
//!   `mix(seed ^ mix(c))`.
//! - A standard-normal deviate for cell index `c` consumes words `2c` and
//!   `2c + 1`, maps them to uniforms `u1 ∈ (0, 1]` and `u2 ∈ [0, 1)` using
//!   the top 53 bits, and applies the Box–Muller transform
//!   `sqrt(-2 ln u1) * cos(2π u2)`.
//! - Cell index for entry (i, j) of an `rows × cols` matrix is `i*cols + j`.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer: a bijective avalanche mix of a 64-bit word.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The `counter`-th raw word of the stream identified by `seed`.
#[inline]
pub fn counter_u64(seed: u64, counter: u64) -> u64 {
    splitmix64(seed ^ splitmix64(counter))
}

/// Derive an independent stream key from `seed` and a fixed tag.
///
/// Used to give logically distinct consumers (e.g. the two factors of a
/// factorized embedding) disjoint streams without colliding with `seed + k`
/// conventions used elsewhere.
#[inline]
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    counter_u64(seed, tag)
}

/// Standard-normal deviate for cell `index` of stream `seed`.
///
/// Pure function of `(seed, index)`; see the module docs for the exact
/// construction.
#[inline]
pub fn counter_normal(seed: u64, index: u64) -> f64 {
    const TWO_POW_53: f64 = 9_007_199_254_740_992.0;
    let a = counter_u64(seed, index.wrapping_mul(2));
    let b = counter_u64(seed, index.wrapping_mul(2).wrapping_add(1));
    // (0, 1]: never zero, so ln(u1) is finite.
    let u1 = ((a >> 11) + 1) as f64 / TWO_POW_53;
    // [0, 1)
    let u2 = (b >> 11) as f64 / TWO_POW_53;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
