//! Zip packaging of export bundles. Entries are sorted and carry a fixed
//! timestamp, so equal bundles give equal bytes.

use std::collections::BTreeMap;
use std::io::{Cursor, Read, Write};

use prelabel_core::formats::ExportBundle;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

pub fn zip_bundle(bundle: &ExportBundle) -> zip::result::ZipResult<Vec<u8>> {
    let opts = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644);
    let mut w = ZipWriter::new(Cursor::new(Vec::new()));
    for (name, bytes) in &bundle.files {
        w.start_file(name.as_str(), opts)?;
        w.write_all(bytes)?;
    }
    Ok(w.finish()?.into_inner())
}

/// File entries of a zip archive; directories are skipped.
pub fn unzip_files(bytes: &[u8]) -> zip::result::ZipResult<BTreeMap<String, Vec<u8>>> {
    let mut archive = ZipArchive::new(Cursor::new(bytes))?;
    let mut out = BTreeMap::new();
    for i in 0..archive.len() {
        let mut f = archive.by_index(i)?;
        if f.is_dir() {
            continue;
        }
        let mut buf = Vec::with_capacity(f.size() as usize);
        f.read_to_end(&mut buf)?;
        out.insert(f.name()?.into_owned(), buf);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use prelabel_core::formats::Format;

    #[test]
    fn zip_is_stable_and_reversible() {
        let mut files = BTreeMap::new();
        files.insert("labels/a.txt".to_string(), b"0 0.5 0.5 0.1 0.1\n".to_vec());
        files.insert("data.yaml".to_string(), b"names: {0: cat}\n".to_vec());
        let bundle = ExportBundle { format: Format::Yolo, files };
        let a = zip_bundle(&bundle).unwrap();
        std::thread::sleep(std::time::Duration::from_millis(1100));
        assert_eq!(a, zip_bundle(&bundle).unwrap());
        assert_eq!(unzip_files(&a).unwrap(), bundle.files);
        assert!(unzip_files(b"nope").is_err());
    }
}
