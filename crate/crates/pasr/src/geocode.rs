//! Geohash encoding/decoding and n-gram tokenization.
//!
//! Standard public-domain Geohash: latitude and longitude are bisected
//! alternately (longitude first), the resulting bit stream is packed
//! into 5-bit groups and written with the Base32 geohash alphabet.

use crate::error::{PasrError, Result};

pub const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

/// A latitude/longitude pair in degrees, validated on construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoCoordinate {
    lat: f64,
    lon: f64,
}

impl GeoCoordinate {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(PasrError::CoordinateOutOfRange { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Bounding box of a geohash cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl CellBounds {
    pub fn contains(&self, c: &GeoCoordinate) -> bool {
        self.lat_min <= c.lat && c.lat <= self.lat_max && self.lon_min <= c.lon && c.lon <= self.lon_max
    }
}

fn alphabet_index(ch: u8) -> Option<u8> {
    GEOHASH_ALPHABET.iter().position(|&a| a == ch).map(|i| i as u8)
}

/// Encode a coordinate as a geohash string of the given length.
///
/// Boundary coordinates (+90 latitude, +180 longitude) are clamped into
/// the last half-open interval so they encode like interior points.
pub fn encode_geohash(coord: &GeoCoordinate, len: usize) -> Result<String> {
    if len == 0 || len > 16 {
        return Err(PasrError::GeohashLength { len });
    }
    let lat = coord.lat;
    let lon = coord.lon;
    let mut lat_range = (-90.0f64, 90.0f64);
    let mut lon_range = (-180.0f64, 180.0f64);
    let mut hash = String::with_capacity(len);
    let mut bits: u8 = 0;
    let mut bit_count = 0;
    let mut even = true; // longitude bit next
    while hash.len() < len {
        if even {
            let mid = (lon_range.0 + lon_range.1) / 2.0;
            if lon >= mid {
                bits = (bits << 1) | 1;
                lon_range.0 = mid;
            } else {
                bits <<= 1;
                lon_range.1 = mid;
            }
        } else {
            let mid = (lat_range.0 + lat_range.1) / 2.0;
            if lat >= mid {
                bits = (bits << 1) | 1;
                lat_range.0 = mid;
            } else {
                bits <<= 1;
                lat_range.1 = mid;
            }
        }
        even = !even;
        bit_count += 1;
        if bit_count == 5 {
            hash.push(GEOHASH_ALPHABET[bits as usize] as char);
            bits = 0;
            bit_count = 0;
        }
    }
    Ok(hash)
}

/// Decode a geohash string into the bounding box of its cell.
pub fn decode_geohash(hash: &str) -> Result<CellBounds> {
    if hash.is_empty() || hash.len() > 16 {
        return Err(PasrError::GeohashLength { len: hash.len() });
    }
    let mut lat_range = (-90.0f64, 90.0f64);
    let mut lon_range = (-180.0f64, 180.0f64);
    let mut even = true;
    for ch in hash.bytes() {
        let idx = alphabet_index(ch).ok_or(PasrError::InvalidGeohashChar(ch as char))?;
        for bit in (0..5).rev() {
            let set = (idx >> bit) & 1 == 1;
            if even {
                let mid = (lon_range.0 + lon_range.1) / 2.0;
                if set {
                    lon_range.0 = mid;
                } else {
                    lon_range.1 = mid;
                }
            } else {
                let mid = (lat_range.0 + lat_range.1) / 2.0;
                if set {
                    lat_range.0 = mid;
                } else {
                    lat_range.1 = mid;
                }
            }
            even = !even;
        }
    }
    Ok(CellBounds {
        lat_min: lat_range.0,
        lat_max: lat_range.1,
        lon_min: lon_range.0,
        lon_max: lon_range.1,
    })
}

/// Sliding-window n-gram token ids over a geohash string.
///
/// Token ids are the base-32 positional value of the n characters, so
/// the id space is a dense `[0, 32^n)` without any learned vocabulary.
pub fn ngram_tokenize(hash: &str, n: usize) -> Result<Vec<u32>> {
    if n == 0 || hash.len() < n {
        return Err(PasrError::NgramOrder { n, len: hash.len() });
    }
    let indices: Vec<u32> = hash
        .bytes()
        .map(|ch| alphabet_index(ch).map(u32::from).ok_or(PasrError::InvalidGeohashChar(ch as char)))
        .collect::<Result<_>>()?;
    Ok(indices
        .windows(n)
        .map(|w| w.iter().fold(0u32, |acc, &i| acc * 32 + i))
        .collect())
}

/// Inverse of [`ngram_tokenize`] for a single token: the n characters.
pub fn detokenize(token: u32, n: usize) -> String {
    let mut chars = vec![b'0'; n];
    let mut t = token;
    for i in (0..n).rev() {
        chars[i] = GEOHASH_ALPHABET[(t % 32) as usize];
        t /= 32;
    }
    String::from_utf8(chars).unwrap()
}

/// Vocabulary size for gram order n.
pub fn ngram_vocab_size(n: usize) -> usize {
    32usize.pow(n as u32)
}
