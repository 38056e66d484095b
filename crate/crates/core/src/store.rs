//! The `OBJDUMP1` activation-dump format and its ground-truth sidecar.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! 0..8    b"OBJDUMP1"
//! 8..44   u32 × 9: L, H, N, d, grid_h, grid_w, patch_size, image_h, image_w
//! 44..    for layer in 0..L, head in 0..H, component in (q, k, v):
//!             N·d f32, row-major
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadId;
use crate::tensor::Matrix;

pub const DUMP_MAGIC: &[u8; 8] = b"OBJDUMP1";
const HEADER_BYTES: usize = 8 + 9 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Component {
    Query,
    Key,
    Value,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Query, Component::Key, Component::Value];

    fn offset(self) -> usize {
        match self {
            Component::Query => 0,
            Component::Key => 1,
            Component::Value => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub layers: usize,
    pub heads: usize,
    pub patches: usize,
    pub head_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl DumpHeader {
    /// Header for a `grid_h × grid_w` patch grid; `N` and image size are derived.
    pub fn for_grid(
        layers: usize,
        heads: usize,
        head_dim: usize,
        grid_h: usize,
        grid_w: usize,
        patch_size: usize,
    ) -> Self {
        Self {
            layers,
            heads,
            patches: grid_h * grid_w,
            head_dim,
            grid_h,
            grid_w,
            patch_size,
            image_h: grid_h * patch_size,
            image_w: grid_w * patch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = self.fields();
        if fields.iter().any(|&v| v == 0) {
            return Err(Error::InvalidHeader(format!(
                "all counts must be >= 1, got {fields:?}"
            )));
        }
        if fields.iter().any(|&v| v > u32::MAX as usize) {
            return Err(Error::InvalidHeader("field exceeds u32".into()));
        }
        if self.patches != self.grid_h * self.grid_w {
            return Err(Error::InconsistentGrid(format!(
                "N = {} but grid is {}x{}",
                self.patches, self.grid_h, self.grid_w
            )));
        }
        if self.grid_h * self.patch_size != self.image_h
            || self.grid_w * self.patch_size != self.image_w
        {
            return Err(Error::InconsistentGrid(format!(
                "grid {}x{} at patch {} does not tile image {}x{}",
                self.grid_h, self.grid_w, self.patch_size, self.image_h, self.image_w
            )));
        }
        Ok(())
    }

    fn fields(&self) -> [usize; 9] {
        [
            self.layers,
            self.heads,
            self.patches,
            self.head_dim,
            self.grid_h,
            self.grid_w,
            self.patch_size,
            self.image_h,
            self.image_w,
        ]
    }

    pub fn tensor_count(&self) -> usize {
        3 * self.layers * self.heads
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensor_count() * self.patches * self.head_dim * 4
    }

    pub fn final_layer(&self) -> usize {
        self.layers - 1
    }

    /// Every head in layer-major order.
    pub fn head_ids(&self) -> Vec<HeadId> {
        (0..self.layers)
            .flat_map(|l| (0..self.heads).map(move |h| HeadId::new(l, h)))
            .collect()
    }

    pub fn contains(&self, head: HeadId) -> bool {
        head.layer < self.layers && head.head < self.heads
    }

    /// True when two dumps come from the same model geometry (L, H).
    pub fn same_model(&self, other: &DumpHeader) -> bool {
        self.layers == other.layers && self.heads == other.heads
    }
}

/// Per-head Q/K/V patch-token matrices for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    header: DumpHeader,
    tensors: Vec<Matrix>,
}

impl ActivationDump {
    /// `tensors` must be in layer-major, head, then q/k/v order.
    pub fn new(header: DumpHeader, tensors: Vec<Matrix>) -> Result<Self> {
        header.validate()?;
        if tensors.len() != header.tensor_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                header.tensor_count(),
                tensors.len()
            )));
        }
        if let Some(bad) = tensors
            .iter()
            .find(|t| t.rows() != header.patches || t.cols() != header.head_dim)
        {
            return Err(Error::ShapeMismatch(format!(
                "tensor is {}x{}, expected {}x{}",
                bad.rows(),
                bad.cols(),
                header.patches,
                header.head_dim
            )));
        }
        Ok(Self { header, tensors })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    pub fn tensor(&self, head: HeadId, component: Component) -> &Matrix {
        let idx = (head.layer * self.header.heads + head.head) * 3 + component.offset();
        &self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.header.payload_bytes());
        out.extend_from_slice(DUMP_MAGIC);
        for f in self.header.fields() {
            out.extend_from_slice(&(f as u32).to_le_bytes());
        }
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != DUMP_MAGIC {
            return Err(Error::BadMagic { path: path.into() });
        }
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Truncated {
                path: path.into(),
                expected: HEADER_BYTES as u64,
                found: bytes.len() as u64,
            });
        }
        let mut f = [0usize; 9];
        for (i, slot) in f.iter_mut().enumerate() {
            let at = 8 + 4 * i;
            *slot = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        }
        let header = DumpHeader {
            layers: f[0],
            heads: f[1],
            patches: f[2],
            head_dim: f[3],
            grid_h: f[4],
            grid_w: f[5],
            patch_size: f[6],
            image_h: f[7],
            image_w: f[8],
        };
        header.validate()?;
        let expected = HEADER_BYTES + header.payload_bytes();
        if bytes.len() < expected {
            return Err(Error::Truncated {
                path: path.into(),
                expected: expected as u64,
                found: bytes.len() as u64,
            });
        }
        if bytes.len() > expected {
            return Err(Error::InvalidHeader(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let per = header.patches * header.head_dim;
        let tensors = bytes[HEADER_BYTES..]
            .chunks_exact(per * 4)
            .map(|chunk| {
                let data = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Matrix::new(header.patches, header.head_dim, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(header, tensors)
    }
}

pub fn write_dump(dump: &ActivationDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&dump.to_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationDump> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ActivationDump::from_bytes(&bytes, path)
}

/// Planted object location (grid coordinates, inclusive) and the heads carrying it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedGroundTruth {
    /// `(row_min, col_min, row_max, col_max)`, inclusive on both ends.
    pub object_box_patches: [usize; 4],
    pub planted_heads: Vec<HeadId>,
}

impl PlantedGroundTruth {
    pub fn contains_patch(&self, row: usize, col: usize) -> bool {
        let [r0, c0, r1, c1] = self.object_box_patches;
        (r0..=r1).contains(&row) && (c0..=c1).contains(&col)
    }

    /// Pixel box `[x_min, y_min, x_max, y_max)` for the given patch size.
    pub fn pixel_box(&self, patch_size: usize) -> [f64; 4] {
        let [r0, c0, r1, c1] = self.object_box_patches;
        [
            (c0 * patch_size) as f64,
            (r0 * patch_size) as f64,
            ((c1 + 1) * patch_size) as f64,
            ((r1 + 1) * patch_size) as f64,
        ]
    }
}

pub fn write_ground_truth(gt: &PlantedGroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(gt)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<PlantedGroundTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dump_with(header: DumpHeader, seed: u32) -> ActivationDump {
        let per = header.patches * header.head_dim;
        let tensors = (0..header.tensor_count())
            .map(|t| {
                let data = (0..per)
                    .map(|i| ((i as u32).wrapping_mul(2654435761u32) ^ (t as u32 + seed)) as f32 * 1e-9)
                    .collect();
                Matrix::new(header.patches, header.head_dim, data).unwrap()
            })
            .collect();
        ActivationDump::new(header, tensors).unwrap()
    }

    #[test]
    fn header_offsets_are_bit_exact() {
        let h = DumpHeader::for_grid(2, 3, 4, 2, 5, 16);
        let bytes = dump_with(h, 0).to_bytes();
        assert_eq!(&bytes[..8], b"OBJDUMP1");
        let fields: Vec<u32> = bytes[8..44]
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(fields, vec![2, 3, 10, 4, 2, 5, 16, 32, 80]);
        assert_eq!(bytes.len(), 44 + 2 * 3 * 3 * 10 * 4 * 4);
    }

    #[test]
    fn tensor_order_is_layer_head_component() {
        let h = DumpHeader::for_grid(2, 2, 1, 1, 1, 1);
        let tensors = (0..12)
            .map(|i| Matrix::new(1, 1, vec![i as f32]).unwrap())
            .collect();
        let dump = ActivationDump::new(h, tensors).unwrap();
        assert_eq!(dump.tensor(HeadId::new(0, 0), Component::Query).get(0, 0), 0.0);
        assert_eq!(dump.tensor(HeadId::new(0, 1), Component::Key).get(0, 0), 4.0);
        assert_eq!(dump.tensor(HeadId::new(1, 0), Component::Value).get(0, 0), 8.0);
        assert_eq!(dump.tensor(HeadId::new(1, 1), Component::Value).get(0, 0), 11.0);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = dump_with(DumpHeader::for_grid(1, 1, 2, 2, 2, 4), 1).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            ActivationDump::from_bytes(&bytes, Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = dump_with(DumpHeader::for_grid(1, 1, 2, 2, 2, 4), 1).to_bytes();
        for cut in [20, bytes.len() - 1] {
            assert!(matches!(
                ActivationDump::from_bytes(&bytes[..cut], Path::new("x")),
                Err(Error::Truncated { .. })
            ));
        }
    }

    #[test]
    fn rejects_inconsistent_grid() {
        let mut bytes = dump_with(DumpHeader::for_grid(1, 1, 2, 2, 2, 4), 1).to_bytes();
        // N field
        bytes[16..20].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            ActivationDump::from_bytes(&bytes, Path::new("x")),
            Err(Error::InconsistentGrid(_))
        ));
        let mut h = DumpHeader::for_grid(1, 1, 2, 2, 2, 4);
        h.image_w = 9;
        assert!(matches!(h.validate(), Err(Error::InconsistentGrid(_))));
        h = DumpHeader::for_grid(0, 1, 2, 2, 2, 4);
        assert!(matches!(h.validate(), Err(Error::InvalidHeader(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.objdump");
        let dump = dump_with(DumpHeader::for_grid(2, 2, 3, 3, 2, 8), 7);
        write_dump(&dump, &path).unwrap();
        assert_eq!(read_dump(&path).unwrap(), dump);

        let gt = PlantedGroundTruth {
            object_box_patches: [0, 1, 2, 1],
            planted_heads: vec![HeadId::new(1, 0), HeadId::new(0, 1)],
        };
        let gpath = dir.path().join("a.gt.json");
        write_ground_truth(&gt, &gpath).unwrap();
        let text = fs::read_to_string(&gpath).unwrap();
        assert_eq!(
            text,
            r#"{"object_box_patches":[0,1,2,1],"planted_heads":[[1,0],[0,1]]}"#
        );
        assert_eq!(read_ground_truth(&gpath).unwrap(), gt);
    }

    #[test]
    fn pixel_box_is_half_open() {
        let gt = PlantedGroundTruth {
            object_box_patches: [0, 0, 0, 0],
            planted_heads: vec![HeadId::new(0, 0)],
        };
        assert_eq!(gt.pixel_box(16), [0.0, 0.0, 16.0, 16.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn bytes_round_trip(l in 1usize..4, h in 1usize..4, d in 1usize..5,
                            gh in 1usize..5, gw in 1usize..5, p in 1usize..9,
                            vals in proptest::collection::vec(any::<f32>(), 1..64)) {
            let header = DumpHeader::for_grid(l, h, d, gh, gw, p);
            let per = header.patches * header.head_dim;
            let tensors = (0..header.tensor_count())
                .map(|t| Matrix::new(header.patches, header.head_dim,
                    (0..per).map(|i| vals[(i + t) % vals.len()]).collect()).unwrap())
                .collect();
            let dump = ActivationDump::new(header, tensors).unwrap();
            let bytes = dump.to_bytes();
            let back = ActivationDump::from_bytes(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
