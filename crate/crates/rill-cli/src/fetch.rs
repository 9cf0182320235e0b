//! MNIST download: fetch the gzipped IDX files, verify them against a
//! pinned SHA-256 allowlist, and unpack the raw files `split_mnist` reads.

use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use rill_core::error::{Error, Result};

pub const DEFAULT_BASE_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

pub struct FileSpec {
    pub gz_name: &'static str,
    pub out_name: &'static str,
    /// SHA-256 (hex) of the gzipped payload as served.
    pub sha256: &'static str,
    /// Expected IDX magic of the unpacked file.
    pub magic: u32,
}

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

pub const MNIST_FILES: [FileSpec; 4] = [
    FileSpec {
        gz_name: "train-images-idx3-ubyte.gz",
        out_name: "train-images-idx3-ubyte",
        sha256: "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
        magic: IMAGES_MAGIC,
    },
    FileSpec {
        gz_name: "train-labels-idx1-ubyte.gz",
        out_name: "train-labels-idx1-ubyte",
        sha256: "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
        magic: LABELS_MAGIC,
    },
    FileSpec {
        gz_name: "t10k-images-idx3-ubyte.gz",
        out_name: "t10k-images-idx3-ubyte",
        sha256: "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
        magic: IMAGES_MAGIC,
    },
    FileSpec {
        gz_name: "t10k-labels-idx1-ubyte.gz",
        out_name: "t10k-labels-idx1-ubyte",
        sha256: "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
        magic: LABELS_MAGIC,
    },
];

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn fetch(base_url: &str, dir: &Path, files: &[FileSpec]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for spec in files {
        let out_path = dir.join(spec.out_name);
        if out_path.exists() {
            println!("{} already present, skipping", out_path.display());
            continue;
        }

        let url = format!("{}/{}", base_url.trim_end_matches('/'), spec.gz_name);
        println!("fetching {url}");
        let resp = reqwest::blocking::get(&url)
            .map_err(|e| Error::Runtime(format!("download {url}: {e}")))?;
        if !resp.status().is_success() {
            return Err(Error::Runtime(format!(
                "download {url}: HTTP {}",
                resp.status()
            )));
        }
        let gz = resp
            .bytes()
            .map_err(|e| Error::Runtime(format!("download {url}: {e}")))?;

        let got = sha256_hex(&gz);
        if got != spec.sha256 {
            return Err(Error::Format(format!(
                "{}: checksum mismatch (expected {}, got {got}); refusing to unpack",
                spec.gz_name, spec.sha256
            )));
        }

        let mut raw = Vec::new();
        flate2::read::GzDecoder::new(&gz[..])
            .read_to_end(&mut raw)
            .map_err(|e| Error::Format(format!("{}: bad gzip: {e}", spec.gz_name)))?;
        if raw.len() < 4 {
            return Err(Error::Format(format!(
                "{}: unpacked file too short for an IDX header",
                spec.out_name
            )));
        }
        let magic = u32::from_be_bytes(raw[..4].try_into().unwrap());
        if magic != spec.magic {
            return Err(Error::Format(format!(
                "{}: IDX magic {magic:#010x}, expected {:#010x}",
                spec.out_name, spec.magic
            )));
        }

        // Land the file atomically so an interrupted run never leaves a
        // half-written dataset that a later run would skip as "present".
        let partial = dir.join(format!("{}.partial", spec.out_name));
        std::fs::write(&partial, &raw)?;
        std::fs::rename(&partial, &out_path)?;
        println!(
            "wrote {} ({} bytes, sha256 verified)",
            out_path.display(),
            raw.len()
        );
    }
    Ok(())
}
