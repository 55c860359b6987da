//! Byte-level contract of the interchange files, written here by hand the
//! way an external exporter would.

use cuetrack::bundle::{read_bundle, read_token_grid, write_bundle, BUNDLE_MAGIC, GRID_MAGIC};
use cuetrack::cue_mapping::{map_textual_cue, MapOptions};
use cuetrack::{Error, FeatureBundle, FormatError, Heatmap, ScaleLayout, TokenGrid};

fn u32s(out: &mut Vec<u8>, vals: &[u32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Export {
    dim: u32,
    text_rows: u32,
    valid: u32,
    scales: Vec<(u32, u32)>,
    text: Vec<f32>,
    image: Vec<f32>,
}

impl Export {
    fn new(dim: u32, text_rows: u32, valid: u32, scales: Vec<(u32, u32)>) -> Export {
        let total: u32 = scales.iter().map(|(w, h)| w * h).sum();
        let text = (0..text_rows * dim)
            .map(|i| if i < valid * dim { (i as f32 * 0.37).sin() } else { 0.0 })
            .collect();
        let image = (0..total * dim).map(|i| (i as f32 * 0.11).cos()).collect();
        Export {
            dim,
            text_rows,
            valid,
            scales,
            text,
            image,
        }
    }

    fn bytes(&self) -> Vec<u8> {
        let mut b = b"CTFB".to_vec();
        u32s(
            &mut b,
            &[1, self.dim, self.text_rows, self.valid, self.scales.len() as u32],
        );
        for &(w, h) in &self.scales {
            u32s(&mut b, &[w, h]);
        }
        f32s(&mut b, &self.text);
        f32s(&mut b, &self.image);
        b
    }
}

#[test]
fn exporter_bytes_are_read_field_for_field() {
    let e = Export::new(3, 4, 2, vec![(4, 3), (2, 2)]);
    let b = FeatureBundle::from_bytes(&e.bytes()).unwrap();
    assert_eq!(b.dim(), 3);
    assert_eq!(b.valid_text(), 2);
    assert_eq!(b.layout().all_dims(), &[(4, 3), (2, 2)]);
    assert_eq!(b.text_tokens().rows(), 4);
    let text: Vec<f32> = b.text_tokens().data().iter().map(|&v| v as f32).collect();
    let image: Vec<f32> = b.image_tokens().data().iter().map(|&v| v as f32).collect();
    assert_eq!(text, e.text);
    assert_eq!(image, e.image);
    assert_eq!(b.to_bytes(), e.bytes());
}

#[test]
fn exported_file_feeds_the_mapper() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ctfb");
    std::fs::write(&path, Export::new(8, 6, 3, vec![(6, 5), (3, 3)]).bytes()).unwrap();
    let b = read_bundle(&path).unwrap();
    let h = map_textual_cue(&b, MapOptions::default()).unwrap();
    assert_eq!((h.width(), h.height()), (6, 5));
    assert!(h.values().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn default_layout_spans() {
    let l = ScaleLayout::new(vec![(32, 32), (16, 16), (8, 8), (4, 4)]).unwrap();
    assert_eq!(l.spans(), vec![(0, 1024), (1024, 1280), (1280, 1344), (1344, 1360)]);
    assert_eq!(l.total_tokens(), 1360);
}

#[test]
fn exporter_mistakes_are_typed() {
    let good = Export::new(2, 3, 1, vec![(2, 2)]);

    let mut short = good.bytes();
    short.truncate(short.len() - 4);
    assert!(matches!(
        FeatureBundle::from_bytes(&short),
        Err(Error::Format(FormatError::Truncated { .. }))
    ));

    let mut long = good.bytes();
    long.extend_from_slice(&[0; 4]);
    assert!(matches!(
        FeatureBundle::from_bytes(&long),
        Err(Error::Format(FormatError::TrailingBytes(4)))
    ));

    let mut dirty = Export::new(2, 3, 1, vec![(2, 2)]);
    dirty.text[5] = 1.0;
    assert!(matches!(
        FeatureBundle::from_bytes(&dirty.bytes()),
        Err(Error::Format(FormatError::Layout(_)))
    ));

    let mut nan = good.bytes();
    let at = nan.len() - 4;
    nan[at..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(
        FeatureBundle::from_bytes(&nan),
        Err(Error::Format(FormatError::NonFinite(_)))
    ));

    let mut magic = good.bytes();
    magic[..4].copy_from_slice(b"CTFX");
    assert!(matches!(
        FeatureBundle::from_bytes(&magic),
        Err(Error::Format(FormatError::BadMagic { expected, .. })) if expected == BUNDLE_MAGIC
    ));

    let mut version = good.bytes();
    version[4] = 2;
    assert!(matches!(
        FeatureBundle::from_bytes(&version),
        Err(Error::Format(FormatError::VersionMismatch { found: 2, .. }))
    ));

    // Claims more scale tokens than the payload holds.
    let mut inflated = Export::new(2, 3, 1, vec![(2, 2)]);
    inflated.scales = vec![(3, 2)];
    assert!(FeatureBundle::from_bytes(&inflated.bytes()).is_err());

    let mut zero_valid = Export::new(2, 3, 1, vec![(2, 2)]);
    zero_valid.valid = 0;
    zero_valid.text.iter_mut().for_each(|v| *v = 0.0);
    assert!(FeatureBundle::from_bytes(&zero_valid.bytes()).is_err());
}

#[test]
fn write_read_write_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let e = Export::new(5, 4, 4, vec![(5, 5), (3, 2), (1, 1)]);
    let a = dir.path().join("a.ctfb");
    let b = dir.path().join("b.ctfb");
    std::fs::write(&a, e.bytes()).unwrap();
    write_bundle(&read_bundle(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn hand_written_grid_and_heatmap() {
    let mut g = GRID_MAGIC.to_vec();
    u32s(&mut g, &[1, 2, 6, 3, 2]);
    f32s(&mut g, &[0.5; 12]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.cttg");
    std::fs::write(&path, &g).unwrap();
    let grid: TokenGrid = read_token_grid(&path).unwrap();
    assert_eq!(grid.shape(), (6, 2, 3, 2));
    assert_eq!((grid.width(), grid.height()), (3, 2));
    assert_eq!(grid.to_bytes(), g);

    let mut inconsistent = GRID_MAGIC.to_vec();
    u32s(&mut inconsistent, &[1, 2, 5, 3, 2]);
    f32s(&mut inconsistent, &[0.5; 10]);
    assert!(TokenGrid::from_bytes(&inconsistent).is_err());

    let mut h = b"CTHM".to_vec();
    u32s(&mut h, &[1, 2, 2]);
    h.push(1);
    f32s(&mut h, &[0.0, 0.25, 0.5, 1.0]);
    let map = Heatmap::from_bytes(&h).unwrap();
    assert_eq!(map.values(), &[0.0, 0.25, 0.5, 1.0]);
    assert_eq!(map.to_bytes(), h);

    let mut out_of_range = h.clone();
    let at = out_of_range.len() - 4;
    out_of_range[at..].copy_from_slice(&1.5f32.to_le_bytes());
    assert!(matches!(
        Heatmap::from_bytes(&out_of_range),
        Err(Error::Format(FormatError::Layout(_)))
    ));
}
