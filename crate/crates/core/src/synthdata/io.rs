//! Binary PPM (P6) images, binary PGM (P5) masks holding raw class
//! indices, and the tab-separated dataset manifest.
//!
//! A manifest ends with `# end <n> entries`; a file without that line, or
//! with a different entry count, is treated as truncated.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Sample, SegMask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MANIFEST_HEADER: &str = "# stemseg manifest v1: sample_id\tdomain_id\tlabeled\timage\tmask";
const MANIFEST_END: &str = "# end ";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Pnm<'a> {
    w: usize,
    h: usize,
    pixels: &'a [u8],
}

/// Parses a P5/P6 header (with `#` comments) and returns the pixel payload.
fn parse_pnm<'a>(bytes: &'a [u8], magic: &[u8; 2], channels: usize, path: &Path) -> Result<Pnm<'a>> {
    let bad = |reason: &str| Error::format(path, reason);
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad("wrong magic number"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a number in header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?;
        *field = text.parse().map_err(|_| bad("header number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(bad("missing whitespace after header")),
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only 8-bit (maxval 255) files are supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero-sized image"));
    }
    let need = w.checked_mul(h).and_then(|v| v.checked_mul(channels)).ok_or_else(|| bad("size overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(bad("truncated pixel data"));
    }
    if payload.len() > need {
        return Err(bad("trailing bytes after pixel data"));
    }
    Ok(Pnm { w, h, pixels: payload })
}

pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let [n, c, h, w] = image.shape();
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("save_image expects (1,3,H,W), got {:?}", image.shape())));
    }
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.at(0, ch, y, x).clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    write_file(path, &bytes)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let pnm = parse_pnm(&bytes, b"P6", 3, path)?;
    let mut image = Tensor::zeros([1, 3, pnm.h, pnm.w]);
    for y in 0..pnm.h {
        for x in 0..pnm.w {
            for ch in 0..3 {
                let b = pnm.pixels[(y * pnm.w + x) * 3 + ch];
                image.set(0, ch, y, x, b as f32 / 255.0);
            }
        }
    }
    Ok(image)
}

pub fn save_mask(path: &Path, mask: &SegMask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.w(), mask.h()).into_bytes();
    bytes.extend_from_slice(mask.classes());
    write_file(path, &bytes)
}

pub fn load_mask(path: &Path) -> Result<SegMask> {
    let bytes = read_file(path)?;
    let pnm = parse_pnm(&bytes, b"P5", 1, path)?;
    SegMask::new(pnm.h, pnm.w, pnm.pixels.to_vec()).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub domain_id: u32,
    /// Relative to the manifest's directory.
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn labeled(&self) -> bool {
        self.mask.is_some()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn labeled_count(&self) -> usize {
        self.entries.iter().filter(|e| e.labeled()).count()
    }

    pub fn unlabeled_count(&self) -> usize {
        self.entries.len() - self.labeled_count()
    }

    pub fn render(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.sample_id,
                e.domain_id,
                u8::from(e.labeled()),
                e.image.display(),
                e.mask.as_ref().map_or_else(|| "-".to_string(), |m| m.display().to_string()),
            ));
        }
        out.push_str(&format!("{MANIFEST_END}{} entries\n", self.entries.len()));
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Manifest> {
        let mut entries = Vec::new();
        let mut ids = HashSet::new();
        let mut end = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", lineno + 1));
            if line.is_empty() {
                continue;
            }
            if end.is_some() {
                return Err(bad("content after the end line"));
            }
            if let Some(rest) = line.strip_prefix(MANIFEST_END) {
                let n: usize = rest
                    .strip_suffix(" entries")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| bad("malformed end line"))?;
                end = Some(n);
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let domain_id = cols[1].parse().map_err(|_| bad("bad domain id"))?;
            let labeled = match cols[2] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("labeled flag must be 0 or 1")),
            };
            let mask = match (labeled, cols[4]) {
                (true, "-") => return Err(bad("labeled entry without mask path")),
                (true, m) => Some(PathBuf::from(m)),
                (false, "-") => None,
                (false, _) => return Err(bad("unlabeled entry with mask path")),
            };
            if cols[0].is_empty() {
                return Err(bad("empty sample id"));
            }
            if !ids.insert(cols[0]) {
                return Err(bad("duplicate sample id"));
            }
            entries.push(ManifestEntry {
                sample_id: cols[0].to_string(),
                domain_id,
                image: PathBuf::from(cols[3]),
                mask,
            });
        }
        match end {
            None => Err(Error::format(path, "missing end line, file truncated")),
            Some(_) if !text.ends_with('\n') => Err(Error::format(path, "end line not terminated, file truncated")),
            Some(n) if n != entries.len() => Err(Error::format(path, format!("end line counts {n} entries, found {}", entries.len()))),
            Some(_) => Ok(Manifest { entries }),
        }
    }
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_file(path, manifest.render().as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "manifest is not utf-8"))?;
    Manifest::parse(&text, path)
}

/// Writes `images/<id>.ppm` (and `masks/<id>.pgm` when labeled) under
/// `root`, returning the manifest entry.
pub fn save_sample(root: &Path, sample: &Sample) -> Result<ManifestEntry> {
    let image = PathBuf::from("images").join(format!("{}.ppm", sample.sample_id));
    save_image(&root.join(&image), &sample.image)?;
    let mask = match &sample.mask {
        Some(m) => {
            let rel = PathBuf::from("masks").join(format!("{}.pgm", sample.sample_id));
            save_mask(&root.join(&rel), m)?;
            Some(rel)
        }
        None => None,
    };
    Ok(ManifestEntry {
        sample_id: sample.sample_id.clone(),
        domain_id: sample.domain_id,
        image,
        mask,
    })
}

pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<Sample> {
    let image_path = root.join(&entry.image);
    let image = load_image(&image_path)?;
    let mask = match &entry.mask {
        Some(rel) => {
            let p = root.join(rel);
            let m = load_mask(&p)?;
            if m.h() != image.h() || m.w() != image.w() {
                return Err(Error::format(
                    p,
                    format!("mask {}x{} vs image {}x{}", m.h(), m.w(), image.h(), image.w()),
                ));
            }
            Some(m)
        }
        None => None,
    };
    Ok(Sample {
        image,
        mask,
        domain_id: entry.domain_id,
        sample_id: entry.sample_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, SceneSpec};

    #[test]
    fn sample_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&SceneSpec::default(), 1).unwrap().remove(0);
        let entry = save_sample(dir.path(), &s).unwrap();
        let back = load_sample(dir.path(), &entry).unwrap();
        assert_eq!(back.mask, s.mask);
        for (a, b) in back.image.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn manifest_counts_99_4500() {
        let entries = (0..4599)
            .map(|i| ManifestEntry {
                sample_id: format!("s{i:05}"),
                domain_id: 1 + (i % 9) as u32,
                image: PathBuf::from(format!("images/s{i:05}.ppm")),
                mask: (i < 99).then(|| PathBuf::from(format!("masks/s{i:05}.pgm"))),
            })
            .collect();
        let m = Manifest { entries };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.txt");
        save_manifest(&p, &m).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back.labeled_count(), 99);
        assert_eq!(back.unlabeled_count(), 4500);
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&SceneSpec::default(), 1).unwrap().remove(0);
        let entry = save_sample(dir.path(), &s).unwrap();
        for rel in [&entry.image, entry.mask.as_ref().unwrap()] {
            let p = dir.path().join(rel);
            let bytes = fs::read(&p).unwrap();
            for cut in [0, 1, 5, 12, bytes.len() - 1] {
                fs::write(&p, &bytes[..cut]).unwrap();
                assert!(load_sample(dir.path(), &entry).is_err(), "cut at {cut}");
            }
            fs::write(&p, &bytes).unwrap();
        }
    }

    #[test]
    fn mask_with_bad_class_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 9]);
        fs::write(&p, bytes).unwrap();
        assert!(load_mask(&p).is_err());
    }

    #[test]
    fn header_comments_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 3]);
        fs::write(&p, bytes).unwrap();
        assert_eq!(load_mask(&p).unwrap().classes(), &[1, 3]);
    }

    #[test]
    fn image_mask_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&SceneSpec::default(), 1).unwrap().remove(0);
        let entry = save_sample(dir.path(), &s).unwrap();
        save_mask(&dir.path().join(entry.mask.as_ref().unwrap()), &SegMask::filled(4, 4, 0).unwrap()).unwrap();
        assert!(load_sample(dir.path(), &entry).is_err());
    }

    #[test]
    fn manifest_rejects_malformed_lines() {
        let p = Path::new("m.txt");
        assert!(Manifest::parse("a\t1\t1\timg\t-\n", p).is_err());
        assert!(Manifest::parse("a\t1\t0\timg\tmask\n", p).is_err());
        assert!(Manifest::parse("a\tx\t0\timg\t-\n", p).is_err());
        assert!(Manifest::parse("a\t1\t0\timg\n", p).is_err());
        assert_eq!(Manifest::parse("# c\n\na\t1\t0\timg\t-\n# end 1 entries\n", p).unwrap().entries.len(), 1);
        assert!(Manifest::parse("# c\n\na\t1\t0\timg\t-\n", p).is_err());
        assert!(Manifest::parse("a\t1\t0\timg\t-\n# end 2 entries\n", p).is_err());
        assert!(Manifest::parse("a\t1\t0\timg\t-\na\t1\t0\timg\t-\n# end 2 entries\n", p).is_err());
        assert!(Manifest::parse("# end 0 entries\na\t1\t0\timg\t-\n", p).is_err());
        assert_eq!(Manifest::parse("# end 0 entries\n", p).unwrap(), Manifest::default());
        assert!(Manifest::parse("# end 0 entries", p).is_err());
    }
}
