use image::imageops::FilterType;
use image::{DynamicImage, GrayImage};
use md5::{Digest, Md5};

pub fn md5_hex(bytes: &[u8]) -> String {
    hex::encode(Md5::digest(bytes))
}

/// 64-bit difference hash: the image is reduced to a 9x8 grayscale thumbnail
/// and each bit records whether a pixel is brighter than its right neighbour.
/// Bits are packed row-major, most significant bit first.
pub fn dhash(image: &DynamicImage) -> u64 {
    let thumb: GrayImage = image::imageops::resize(&image.to_luma8(), 9, 8, FilterType::Triangle);
    let mut hash = 0u64;
    for y in 0..8 {
        for x in 0..8 {
            let left = thumb.get_pixel(x, y)[0];
            let right = thumb.get_pixel(x + 1, y)[0];
            hash = (hash << 1) | u64::from(left > right);
        }
    }
    hash
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Serde helpers storing a 64-bit hash as 16 lowercase hex digits.
pub mod hex64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(h) => s.serialize_some(&format!("{h:016x}")),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        let s: Option<String> = Option::deserialize(d)?;
        s.map(|s| u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    #[test]
    fn md5_known_vector() {
        assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(md5_hex(b"abc"), "900150983cd24fb0d6963f7d28e17f72");
    }

    #[test]
    fn dhash_of_left_to_right_darkening_is_all_ones() {
        let img = RgbImage::from_fn(90, 80, |x, _| {
            let v = 255 - (x * 255 / 89) as u8;
            Rgb([v, v, v])
        });
        assert_eq!(dhash(&DynamicImage::ImageRgb8(img)), u64::MAX);
    }

    #[test]
    fn dhash_of_flat_image_is_zero() {
        let img = RgbImage::from_pixel(30, 30, Rgb([120, 40, 200]));
        assert_eq!(dhash(&DynamicImage::ImageRgb8(img)), 0);
    }

    #[test]
    fn hamming_counts_bits() {
        assert_eq!(hamming(0, u64::MAX), 64);
        assert_eq!(hamming(0b1011, 0b0001), 2);
    }
}
