//! On-disk cache of index maps keyed by the meshes and support radius.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::index_map::{build_index_map_bucketed, IndexMap, OpCounter};
use crate::mesh::Mesh;

pub const CACHE_DIR_ENV: &str = "QCKIT_CACHE_DIR";

#[derive(Debug, Clone)]
pub struct MapCache {
    dir: PathBuf,
}

impl MapCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        MapCache { dir: dir.into() }
    }

    /// The directory named by `QCKIT_CACHE_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(CACHE_DIR_ENV).map(MapCache::new)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Hex SHA-256 of both meshes' file bytes and the radius bits.
    pub fn key(input: &Mesh, output: &Mesh, alpha: f64) -> String {
        let mut h = Sha256::new();
        h.update(input.to_bytes());
        h.update(output.to_bytes());
        h.update(alpha.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn path_for(&self, input: &Mesh, output: &Mesh, alpha: f64) -> PathBuf {
        self.dir.join(format!("{}.qcmap", Self::key(input, output, alpha)))
    }

    pub fn store(&self, input: &Mesh, output: &Mesh, map: &IndexMap) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir)?;
        let path = self.path_for(input, output, map.alpha());
        map.save(&path)?;
        Ok(path)
    }

    /// Loads the cached map for these meshes, or builds and stores it. The flag
    /// is `true` on a cache hit, in which case no distances are evaluated.
    pub fn get_or_build(
        &self,
        input: &Mesh,
        output: &Mesh,
        alpha: f64,
        counter: &OpCounter,
    ) -> Result<(IndexMap, bool)> {
        let path = self.path_for(input, output, alpha);
        if path.exists() {
            match IndexMap::load(&path) {
                Ok(map) if map.alpha() == alpha && map.check_sizes(input.len(), output.len()).is_ok() => {
                    info!("cache hit: {}", path.display());
                    return Ok((map, true));
                }
                Ok(_) => warn!("cache entry {} does not match, rebuilding", path.display()),
                Err(e) => warn!("unreadable cache entry {}: {e}; rebuilding", path.display()),
            }
        }
        let map = build_index_map_bucketed(input, output, alpha, counter)?;
        self.store(input, output, &map)?;
        info!("cache miss: stored {}", path.display());
        Ok((map, false))
    }
}
