//! Source images and the region payloads sent to backends.

use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use image::{ImageFormat, RgbaImage};
use thiserror::Error;

use crate::digest::Digest;
use crate::geometry::{BBox, ImageExtent};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("cannot decode image {image_id}: {reason}")]
    Decode { image_id: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("box {bbox} lies outside the {width}x{height} image")]
    OutOfBounds { bbox: BBox, width: u32, height: u32 },
    #[error("png encoding failed: {0}")]
    Encode(String),
}

#[derive(Debug, Clone)]
enum Content {
    Raster(Arc<RgbaImage>),
    /// Bytes that are not pixels (synthetic scenes).
    Opaque,
}

#[derive(Debug, Clone)]
pub struct SourceImage {
    pub image_id: String,
    bytes: Arc<[u8]>,
    pub extent: ImageExtent,
    pub content_digest: Digest,
    content: Content,
}

impl SourceImage {
    pub fn from_bytes(image_id: impl Into<String>, bytes: Vec<u8>) -> Result<Self, ImagingError> {
        let image_id = image_id.into();
        let format = image::guess_format(&bytes).map_err(|e| ImagingError::Decode {
            image_id: image_id.clone(),
            reason: format!("unrecognized format ({e})"),
        })?;
        if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
            return Err(ImagingError::Decode {
                image_id,
                reason: format!("{format:?} is not supported, expected PNG or JPEG"),
            });
        }
        let decoded = image::load_from_memory_with_format(&bytes, format).map_err(|e| {
            ImagingError::Decode { image_id: image_id.clone(), reason: format!("{format:?}: {e}") }
        })?;
        let rgba = decoded.into_rgba8();
        Ok(Self {
            extent: ImageExtent::new(rgba.width(), rgba.height()),
            content_digest: Digest::of(&bytes),
            bytes: bytes.into(),
            image_id,
            content: Content::Raster(Arc::new(rgba)),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|source| ImagingError::Io { path: path.display().to_string(), source })?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::from_bytes(id, bytes)
    }

    /// An image whose bytes are an opaque blob with a declared extent. Crops
    /// of it are the blob prefixed with a `REGION x0 y0 x1 y1` header line.
    pub fn opaque(image_id: impl Into<String>, bytes: Vec<u8>, extent: ImageExtent) -> Self {
        Self {
            image_id: image_id.into(),
            content_digest: Digest::of(&bytes),
            bytes: bytes.into(),
            extent,
            content: Content::Opaque,
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn pixels(&self) -> Option<&RgbaImage> {
        match &self.content {
            Content::Raster(img) => Some(img),
            Content::Opaque => None,
        }
    }

    pub fn full_region(&self) -> Result<RegionPayload, ImagingError> {
        let bbox = self.extent.full_box().map_err(|_| ImagingError::OutOfBounds {
            bbox: BBox::new(0, 0, 1, 1).expect("unit box"),
            width: self.extent.width,
            height: self.extent.height,
        })?;
        crop_region(self, bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPayload {
    pub image_id: String,
    pub bbox: BBox,
    /// Base64 of the PNG-encoded crop, or of the region-tagged opaque blob.
    pub encoded: String,
    pub digest: Digest,
}

impl RegionPayload {
    pub fn data_url(&self) -> String {
        format!("data:image/png;base64,{}", self.encoded)
    }

    pub fn decoded_bytes(&self) -> Vec<u8> {
        BASE64.decode(&self.encoded).expect("payload holds valid base64")
    }
}

pub fn crop_region(img: &SourceImage, bbox: BBox) -> Result<RegionPayload, ImagingError> {
    if !bbox.within(img.extent) {
        return Err(ImagingError::OutOfBounds {
            bbox,
            width: img.extent.width,
            height: img.extent.height,
        });
    }
    match &img.content {
        Content::Raster(pixels) => {
            let crop = image::imageops::crop_imm(
                pixels.as_ref(),
                bbox.x0(),
                bbox.y0(),
                bbox.width(),
                bbox.height(),
            )
            .to_image();
            let mut png = Vec::new();
            crop.write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
                .map_err(|e| ImagingError::Encode(e.to_string()))?;
            Ok(RegionPayload {
                image_id: img.image_id.clone(),
                bbox,
                digest: Digest::of(&png),
                encoded: BASE64.encode(&png),
            })
        }
        Content::Opaque => {
            let mut bytes =
                format!("REGION {} {} {} {}\n", bbox.x0(), bbox.y0(), bbox.x1(), bbox.y1()).into_bytes();
            bytes.extend_from_slice(&img.bytes);
            Ok(RegionPayload {
                image_id: img.image_id.clone(),
                bbox,
                digest: Digest::of(&bytes),
                encoded: BASE64.encode(&bytes),
            })
        }
    }
}

#[cfg(test)]
pub(crate) fn test_png(width: u32, height: u32) -> Vec<u8> {
    let img = RgbaImage::from_fn(width, height, |x, y| {
        image::Rgba([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8, 255])
    });
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).unwrap();
    out
}
