use std::path::{Path, PathBuf};
use std::process::Command;

use super::{FaceClass, ParsingMap};
use crate::error::{Error, Result};
use crate::image::{load_luma8, Image};

/// Image → per-pixel face classes.
pub trait FaceParser: Send + Sync {
    fn name(&self) -> &str;

    fn parse(&self, image: &Image, id: &str) -> Result<ParsingMap>;

    /// Serial adapters are never invoked from more than one thread at a time.
    fn is_serial(&self) -> bool {
        false
    }
}

/// Labels a centered ellipse as skin and everything else as background.
#[derive(Debug, Clone)]
pub struct EllipseParser {
    /// Semi-axes as fractions of height and width.
    pub radius_y: f64,
    pub radius_x: f64,
}

impl Default for EllipseParser {
    fn default() -> Self {
        Self {
            radius_y: 0.4,
            radius_x: 0.3,
        }
    }
}

impl EllipseParser {
    pub fn contains(&self, height: usize, width: usize, y: usize, x: usize) -> bool {
        let cy = height as f64 / 2.0;
        let cx = width as f64 / 2.0;
        let dy = (y as f64 + 0.5 - cy) / (self.radius_y * height as f64);
        let dx = (x as f64 + 0.5 - cx) / (self.radius_x * width as f64);
        dy * dy + dx * dx <= 1.0
    }
}

impl FaceParser for EllipseParser {
    fn name(&self) -> &str {
        "ellipse"
    }

    fn parse(&self, image: &Image, _id: &str) -> Result<ParsingMap> {
        let (h, w) = image.dims();
        Ok(ParsingMap::from_fn(h, w, |y, x| {
            if self.contains(h, w, y, x) {
                FaceClass::Skin
            } else {
                FaceClass::Background
            }
        }))
    }
}

/// Returns the same class everywhere.
#[derive(Debug, Clone)]
pub struct ConstantParser(pub FaceClass);

impl Default for ConstantParser {
    fn default() -> Self {
        Self(FaceClass::Background)
    }
}

impl FaceParser for ConstantParser {
    fn name(&self) -> &str {
        "stub"
    }

    fn parse(&self, image: &Image, _id: &str) -> Result<ParsingMap> {
        let (h, w) = image.dims();
        Ok(ParsingMap::filled(h, w, self.0))
    }
}

/// Delegates to an external parsing program (e.g. a BiSeNet inference script).
///
/// Each argument may contain `{input}`, `{output}` and `{asset}` placeholders. The
/// program reads the RGB PNG at `{input}` and writes an 8-bit label PNG of the same
/// size to `{output}`, labels in the 19-class BiSeNet ordering.
#[derive(Debug, Clone)]
pub struct CommandParser {
    pub command: Vec<String>,
    pub asset: Option<PathBuf>,
}

impl FaceParser for CommandParser {
    fn name(&self) -> &str {
        "bisenet"
    }

    fn parse(&self, image: &Image, _id: &str) -> Result<ParsingMap> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("input.png");
        let output = dir.path().join("labels.png");
        image.save(&input)?;
        run_command(self.name(), &self.command, &input, &output, self.asset.as_deref())?;
        let labels = load_luma8(&output)?;
        let (w, h) = labels.dimensions();
        ParsingMap::from_raw(h as usize, w as usize, labels.as_raw(), FaceClass::from_bisenet).map_err(|e| match e {
            Error::Adapter { reason, .. } => Error::Adapter {
                adapter: self.name().into(),
                id: None,
                reason,
            },
            other => other,
        })
    }

    fn is_serial(&self) -> bool {
        true
    }
}

pub(crate) fn run_command(
    adapter: &str,
    template: &[String],
    input: &Path,
    output: &Path,
    asset: Option<&Path>,
) -> Result<()> {
    let (program, args) = template.split_first().ok_or_else(|| Error::Adapter {
        adapter: adapter.into(),
        id: None,
        reason: "empty command".into(),
    })?;
    let asset = asset.map(|p| p.display().to_string()).unwrap_or_default();
    let expand = |s: &str| {
        s.replace("{input}", &input.display().to_string())
            .replace("{output}", &output.display().to_string())
            .replace("{asset}", &asset)
    };
    let out = Command::new(expand(program))
        .args(args.iter().map(|a| expand(a)))
        .output()
        .map_err(|e| Error::Adapter {
            adapter: adapter.into(),
            id: None,
            reason: format!("failed to launch `{program}`: {e}"),
        })?;
    if !out.status.success() {
        return Err(Error::Adapter {
            adapter: adapter.into(),
            id: None,
            reason: format!(
                "`{program}` exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            ),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipse_is_centered_skin() {
        let img = Image::filled(40, 30, 0.0);
        let map = EllipseParser::default().parse(&img, "a").unwrap();
        assert_eq!(map.get(20, 15), FaceClass::Skin);
        assert_eq!(map.get(0, 0), FaceClass::Background);
        assert_eq!(map.get(39, 29), FaceClass::Background);
        // left/right symmetric
        for y in 0..40 {
            for x in 0..30 {
                assert_eq!(map.get(y, x), map.get(y, 29 - x));
                assert_eq!(map.get(y, x), map.get(39 - y, x));
            }
        }
    }

    #[test]
    fn constant_stub() {
        let img = Image::filled(6, 6, 0.5);
        let map = ConstantParser::default().parse(&img, "a").unwrap();
        assert!(map.labels().iter().all(|l| *l == FaceClass::Background));
    }

    #[cfg(unix)]
    #[test]
    fn command_failure_is_reported() {
        let p = CommandParser {
            command: vec!["false".into()],
            asset: None,
        };
        let err = super::super::parse_face(&Image::filled(4, 4, 0.0), "s1", &p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("s1") && msg.contains("bisenet"), "{msg}");
    }
}
