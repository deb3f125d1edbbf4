//! External-process invocation from argument templates.
//!
//! A template such as `tesseract {image} stdout -l {lang}` is split on
//! whitespace first and placeholders are substituted per argument, so
//! substituted paths may contain spaces.

use std::collections::BTreeMap;
use std::process::Command;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("empty command template")]
    Empty,
    #[error("failed to start '{program}': {source}")]
    Spawn { program: String, source: std::io::Error },
    #[error("'{program}' exited with {status}: {stderr}")]
    Failed { program: String, status: String, stderr: String },
    #[error("unresolved placeholder {{{0}}} in template")]
    Unresolved(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandTemplate {
    args: Vec<String>,
}

impl CommandTemplate {
    pub fn parse(template: &str) -> Result<Self, CommandError> {
        let args: Vec<String> = template.split_whitespace().map(str::to_string).collect();
        if args.is_empty() {
            return Err(CommandError::Empty);
        }
        Ok(Self { args })
    }

    pub fn program(&self) -> &str {
        &self.args[0]
    }

    /// Arguments with `{name}` replaced from `vars`.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<Vec<String>, CommandError> {
        self.args
            .iter()
            .map(|arg| {
                for name in placeholders(arg) {
                    if !vars.contains_key(name) {
                        return Err(CommandError::Unresolved(name.to_string()));
                    }
                }
                let mut out = arg.clone();
                for (k, v) in vars {
                    out = out.replace(&format!("{{{k}}}"), v);
                }
                Ok(out)
            })
            .collect()
    }

    /// Runs to completion and returns stdout.
    pub fn run(&self, vars: &BTreeMap<&str, String>) -> Result<String, CommandError> {
        let argv = self.render(vars)?;
        let program = argv[0].clone();
        let output = Command::new(&program)
            .args(&argv[1..])
            .output()
            .map_err(|source| CommandError::Spawn { program: program.clone(), source })?;
        if !output.status.success() {
            return Err(CommandError::Failed {
                program,
                status: output.status.to_string(),
                stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        Ok(String::from_utf8_lossy(&output.stdout).into_owned())
    }
}

fn placeholders(arg: &str) -> impl Iterator<Item = &str> {
    arg.split('{').skip(1).filter_map(|rest| {
        let name = &rest[..rest.find('}')?];
        (!name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')).then_some(name)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_per_argument() {
        let t = CommandTemplate::parse("ocr {image} stdout -l {lang}").unwrap();
        let vars = BTreeMap::from([("image", "/tmp/a b.png".to_string()), ("lang", "lat".to_string())]);
        assert_eq!(t.render(&vars).unwrap(), vec!["ocr", "/tmp/a b.png", "stdout", "-l", "lat"]);
        assert!(matches!(t.render(&BTreeMap::new()), Err(CommandError::Unresolved(n)) if n == "image"));
        assert!(matches!(CommandTemplate::parse("  "), Err(CommandError::Empty)));
    }

    #[cfg(unix)]
    #[test]
    fn runs_and_reports_failures() {
        let echo = CommandTemplate::parse("echo {word}").unwrap();
        let out = echo.run(&BTreeMap::from([("word", "hello".to_string())])).unwrap();
        assert_eq!(out.trim(), "hello");
        let missing = CommandTemplate::parse("definitely-not-a-real-binary-xyz").unwrap();
        assert!(matches!(missing.run(&BTreeMap::new()), Err(CommandError::Spawn { .. })));
        let fail = CommandTemplate::parse("false").unwrap();
        assert!(matches!(fail.run(&BTreeMap::new()), Err(CommandError::Failed { .. })));
    }
}
