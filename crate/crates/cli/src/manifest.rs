use sha2::{Digest, Sha256};

/// Ordered `key = value` record of a run. The run id hashes every entry
/// added before [`Manifest::seal`], so identical flags give identical ids.
#[derive(Debug, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
    run_id: Option<String>,
}

impl Manifest {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = (String, String)>) {
        self.entries.extend(entries);
    }

    /// Fixes the run id from the entries so far.
    pub fn seal(&mut self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        let id: String = h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect();
        self.run_id = Some(id.clone());
        id
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(id) = &self.run_id {
            out.push_str(&format!("run_id = {id}\n"));
        }
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
