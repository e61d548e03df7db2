//! AES-256-GCM authenticated encryption.
//!
//! The GHASH field multiply uses Shoup's 4-bit table method; both tables are
//! derived at key setup from a bit-serial reference multiply, so there are no
//! opaque precomputed constants in the source.

use super::aes::Aes256;

/// Authentication tag length in bytes.
pub const TAG_LEN: usize = 16;

/// Tag verification failed; the ciphertext or its associated data was
/// modified, or the wrong key or nonce was used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuthError;

impl std::fmt::Display for AuthError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("authentication tag mismatch")
    }
}

impl std::error::Error for AuthError {}

/// Multiply by x in GF(2^128) with the GCM bit ordering (the most significant
/// bit of the big-endian representation is the coefficient of x^0).
#[inline]
fn mul_x(v: u128) -> u128 {
    let reduce = (v & 1) * (0xe1u128 << 120);
    (v >> 1) ^ reduce
}

/// Bit-serial reference product, used only for table setup and as an oracle
/// in tests.
fn gf_mul_slow(x: u128, h: u128) -> u128 {
    let mut z = 0u128;
    let mut v = h;
    for i in 0..128 {
        if x & (1 << (127 - i)) != 0 {
            z ^= v;
        }
        v = mul_x(v);
    }
    z
}

#[derive(Clone)]
struct GhashKey {
    /// nibble_products[n] = H * (element whose representation is n << 124)
    nibble_products: [u128; 16],
    /// shift_reduce[d] = (element whose representation is d) * x^4
    shift_reduce: [u128; 16],
}

impl GhashKey {
    fn new(h: u128) -> Self {
        let mut nibble_products = [0u128; 16];
        let mut shift_reduce = [0u128; 16];
        for n in 0..16u128 {
            nibble_products[n as usize] = gf_mul_slow(n << 124, h);
            let mut v = n;
            for _ in 0..4 {
                v = mul_x(v);
            }
            shift_reduce[n as usize] = v;
        }
        GhashKey {
            nibble_products,
            shift_reduce,
        }
    }

    /// z * x^4, batching four reduction steps through the table.
    #[inline]
    fn mul_x4(&self, z: u128) -> u128 {
        (z >> 4) ^ self.shift_reduce[(z & 0xf) as usize]
    }

    fn mul_h(&self, x: u128) -> u128 {
        // Horner's scheme over the 32 nibbles of x, starting from the low
        // nibble of the representation (the coefficients of x^124..x^127).
        let mut z = 0u128;
        for i in 0..32 {
            let nibble = ((x >> (4 * i)) & 0xf) as usize;
            z = self.mul_x4(z);
            z ^= self.nibble_products[nibble];
        }
        z
    }
}

#[derive(Clone, Default)]
struct Ghash {
    acc: u128,
}

impl Ghash {
    fn absorb_block(&mut self, key: &GhashKey, block: u128) {
        self.acc = key.mul_h(self.acc ^ block);
    }

    /// Absorb `data` zero-padded to a 16 byte boundary.
    fn absorb_padded(&mut self, key: &GhashKey, data: &[u8]) {
        for chunk in data.chunks(16) {
            let mut block = [0u8; 16];
            block[..chunk.len()].copy_from_slice(chunk);
            self.absorb_block(key, u128::from_be_bytes(block));
        }
    }
}

/// AES-256 in Galois/Counter Mode.
///
/// Nonces of any length are accepted; 96-bit nonces take the standard fast
/// path and other lengths are folded through GHASH as the mode defines.
#[derive(Clone)]
pub struct Gcm256 {
    aes: Aes256,
    ghash: GhashKey,
}

impl Gcm256 {
    pub fn new(key: &[u8; 32]) -> Self {
        let aes = Aes256::new(key);
        let h = u128::from_be_bytes(aes.encrypt_block([0u8; 16]));
        Gcm256 {
            ghash: GhashKey::new(h),
            aes,
        }
    }

    fn initial_counter(&self, nonce: &[u8]) -> [u8; 16] {
        if nonce.len() == 12 {
            let mut j0 = [0u8; 16];
            j0[..12].copy_from_slice(nonce);
            j0[15] = 1;
            j0
        } else {
            let mut g = Ghash::default();
            g.absorb_padded(&self.ghash, nonce);
            g.absorb_block(&self.ghash, (nonce.len() as u128) * 8);
            g.acc.to_be_bytes()
        }
    }

    /// Apply the counter-mode keystream starting one increment past `j0`.
    fn ctr_xor(&self, j0: &[u8; 16], data: &mut [u8]) {
        let mut counter = *j0;
        for chunk in data.chunks_mut(16) {
            inc32(&mut counter);
            let keystream = self.aes.encrypt_block(counter);
            for (b, k) in chunk.iter_mut().zip(keystream.iter()) {
                *b ^= k;
            }
        }
    }

    fn tag(&self, j0: &[u8; 16], aad: &[u8], ciphertext: &[u8]) -> [u8; 16] {
        let mut g = Ghash::default();
        g.absorb_padded(&self.ghash, aad);
        g.absorb_padded(&self.ghash, ciphertext);
        let lengths = ((aad.len() as u128 * 8) << 64) | (ciphertext.len() as u128 * 8);
        g.absorb_block(&self.ghash, lengths);
        let e_j0 = u128::from_be_bytes(self.aes.encrypt_block(*j0));
        (g.acc ^ e_j0).to_be_bytes()
    }

    /// Encrypt `plaintext`, returning the ciphertext and tag.
    pub fn seal(&self, nonce: &[u8], aad: &[u8], plaintext: &[u8]) -> (Vec<u8>, [u8; 16]) {
        let j0 = self.initial_counter(nonce);
        let mut ct = plaintext.to_vec();
        self.ctr_xor(&j0, &mut ct);
        let tag = self.tag(&j0, aad, &ct);
        (ct, tag)
    }

    /// Verify the tag and decrypt. Nothing is returned on failure.
    pub fn open(
        &self,
        nonce: &[u8],
        aad: &[u8],
        ciphertext: &[u8],
        tag: &[u8; 16],
    ) -> Result<Vec<u8>, AuthError> {
        let j0 = self.initial_counter(nonce);
        let expected = self.tag(&j0, aad, ciphertext);
        let mut diff = 0u8;
        for (a, b) in expected.iter().zip(tag.iter()) {
            diff |= a ^ b;
        }
        if diff != 0 {
            return Err(AuthError);
        }
        let mut pt = ciphertext.to_vec();
        self.ctr_xor(&j0, &mut pt);
        Ok(pt)
    }
}

#[inline]
fn inc32(counter: &mut [u8; 16]) {
    let low = u32::from_be_bytes([counter[12], counter[13], counter[14], counter[15]]);
    counter[12..].copy_from_slice(&low.wrapping_add(1).to_be_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gcm(key_hex: &str) -> Gcm256 {
        let key: [u8; 32] = hex::decode(key_hex).unwrap().try_into().unwrap();
        Gcm256::new(&key)
    }

    struct Vector {
        key: &'static str,
        iv: &'static str,
        pt: &'static str,
        aad: &'static str,
        ct: &'static str,
        tag: &'static str,
    }

    // The six standard AES-256-GCM reference vectors that ship with most
    // implementations (all-zero cases, the feffe9... key with 96-bit, 64-bit
    // and 480-bit IVs, with and without associated data).
    const VECTORS: &[Vector] = &[
        Vector {
            key: "0000000000000000000000000000000000000000000000000000000000000000",
            iv: "000000000000000000000000",
            pt: "",
            aad: "",
            ct: "",
            tag: "530f8afbc74536b9a963b4f1c4cb738b",
        },
        Vector {
            key: "0000000000000000000000000000000000000000000000000000000000000000",
            iv: "000000000000000000000000",
            pt: "00000000000000000000000000000000",
            aad: "",
            ct: "cea7403d4d606b6e074ec5d3baf39d18",
            tag: "d0d1c8a799996bf0265b98b5d48ab919",
        },
        Vector {
            key: "feffe9928665731c6d6a8f9467308308feffe9928665731c6d6a8f9467308308",
            iv: "cafebabefacedbaddecaf888",
            pt: "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
                 1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b391aafd255",
            aad: "",
            ct: "522dc1f099567d07f47f37a32a84427d643a8cdcbfe5c0c97598a2bd2555d1aa\
                 8cb08e48590dbb3da7b08b1056828838c5f61e6393ba7a0abcc9f662898015ad",
            tag: "b094dac5d93471bdec1a502270e3cc6c",
        },
        Vector {
            key: "feffe9928665731c6d6a8f9467308308feffe9928665731c6d6a8f9467308308",
            iv: "cafebabefacedbaddecaf888",
            pt: "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
                 1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39",
            aad: "feedfacedeadbeeffeedfacedeadbeefabaddad2",
            ct: "522dc1f099567d07f47f37a32a84427d643a8cdcbfe5c0c97598a2bd2555d1aa\
                 8cb08e48590dbb3da7b08b1056828838c5f61e6393ba7a0abcc9f662",
            tag: "76fc6ece0f4e1768cddf8853bb2d551b",
        },
        Vector {
            key: "feffe9928665731c6d6a8f9467308308feffe9928665731c6d6a8f9467308308",
            iv: "cafebabefacedbad",
            pt: "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
                 1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39",
            aad: "feedfacedeadbeeffeedfacedeadbeefabaddad2",
            ct: "c3762df1ca787d32ae47c13bf19844cbaf1ae14d0b976afac52ff7d79bba9de0\
                 feb582d33934a4f0954cc2363bc73f7862ac430e64abe499f47c9b1f",
            tag: "3a337dbf46a792c45e454913fe2ea8f2",
        },
        Vector {
            key: "feffe9928665731c6d6a8f9467308308feffe9928665731c6d6a8f9467308308",
            iv: "9313225df88406e555909c5aff5269aa6a7a9538534f7da1e4c303d2a318a728\
                 c3c0c95156809539fcf0e2429a6b525416aedbf5a0de6a57a637b39b",
            pt: "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72\
                 1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39",
            aad: "feedfacedeadbeeffeedfacedeadbeefabaddad2",
            ct: "5a8def2f0c9e53f1f75d7853659e2a20eeb2b22aafde6419a058ab4f6f746bf4\
                 0fc0c3b780f244452da3ebf1c5d82cdea2418997200ef82e44ae7e3f",
            tag: "a44a8266ee1c8eb0c8b5d4cf5ae9f19a",
        },
    ];

    #[test]
    fn published_vectors_seal() {
        for (i, v) in VECTORS.iter().enumerate() {
            let g = gcm(v.key);
            let (ct, tag) = g.seal(
                &hex::decode(v.iv).unwrap(),
                &hex::decode(v.aad).unwrap(),
                &hex::decode(v.pt).unwrap(),
            );
            assert_eq!(hex::encode(&ct), v.ct, "ciphertext, vector {i}");
            assert_eq!(hex::encode(tag), v.tag, "tag, vector {i}");
        }
    }

    #[test]
    fn published_vectors_open() {
        for (i, v) in VECTORS.iter().enumerate() {
            let g = gcm(v.key);
            let tag: [u8; 16] = hex::decode(v.tag).unwrap().try_into().unwrap();
            let pt = g
                .open(
                    &hex::decode(v.iv).unwrap(),
                    &hex::decode(v.aad).unwrap(),
                    &hex::decode(v.ct).unwrap(),
                    &tag,
                )
                .expect("valid vector must open");
            assert_eq!(hex::encode(pt), v.pt, "plaintext, vector {i}");
        }
    }

    #[test]
    fn tampered_tag_is_rejected() {
        let v = &VECTORS[3];
        let g = gcm(v.key);
        let mut tag: [u8; 16] = hex::decode(v.tag).unwrap().try_into().unwrap();
        tag[0] ^= 1;
        assert_eq!(
            g.open(
                &hex::decode(v.iv).unwrap(),
                &hex::decode(v.aad).unwrap(),
                &hex::decode(v.ct).unwrap(),
                &tag,
            ),
            Err(AuthError)
        );
    }

    #[test]
    fn nibble_table_matches_bit_serial_multiply() {
        let h = 0x66e94bd4ef8a2c3b884cfa59ca342b2eu128;
        let key = GhashKey::new(h);
        let samples = [
            0u128,
            1,
            u128::MAX,
            0x0123456789abcdef0123456789abcdef,
            h,
            1 << 127,
        ];
        for &x in &samples {
            assert_eq!(key.mul_h(x), gf_mul_slow(x, h), "x = {x:032x}");
        }
    }
}
