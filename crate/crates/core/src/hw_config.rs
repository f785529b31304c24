//! Hardware configuration and task intake.
//!
//! The config document is TOML:
//!
//! ```toml
//! schema_version = 1
//!
//! [platform]
//! name = "Uno R3"
//! arch = "avr"
//! board_id = "arduino:avr:uno"
//! port = "/dev/ttyACM0"        # optional
//!
//! [[modules]]
//! name = "DHT11"
//! pins = ["5"]
//! interface = "gpio"           # gpio | i2c | spi | uart | onboard
//!
//! [task]                       # optional
//! description = "Record the DHT11 temperature reading to SD card"
//!
//! [[secrets]]                  # optional, values masked before leaving the machine
//! value = "hunter2"
//! category = "password"
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::security::SecretCategory;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interface {
    Gpio,
    I2c,
    Spi,
    Uart,
    Onboard,
}

impl Interface {
    /// Buses whose pins may be shared between devices.
    pub fn is_shared_bus(self) -> bool {
        matches!(self, Interface::I2c | Interface::Spi)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Interface::Gpio => "gpio",
            Interface::I2c => "i2c",
            Interface::Spi => "spi",
            Interface::Uart => "uart",
            Interface::Onboard => "onboard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleBinding {
    pub component_name: String,
    pub pins: Vec<String>,
    pub interface: Interface,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredSecret {
    pub value: String,
    pub category: SecretCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareConfig {
    pub platform_name: String,
    pub platform_arch: String,
    pub toolchain_board_id: String,
    pub port: Option<String>,
    pub modules: Vec<ModuleBinding>,
    pub secrets: Vec<DeclaredSecret>,
}

impl HardwareConfig {
    pub fn component_names(&self) -> impl Iterator<Item = &str> {
        self.modules.iter().map(|m| m.component_name.as_str())
    }

    /// Pin metadata as forwarded verbatim into prompts.
    pub fn describe(&self) -> String {
        let mut out = format!(
            "Development platform: {} (architecture: {}, board id: {})\n",
            self.platform_name, self.platform_arch, self.toolchain_board_id
        );
        if self.modules.is_empty() {
            out.push_str("Modules: none\n");
        }
        for m in &self.modules {
            let pins = if m.pins.is_empty() {
                "onboard".to_string()
            } else {
                m.pins.join(", ")
            };
            out.push_str(&format!(
                "- {} on pin(s) {} via {}\n",
                m.component_name,
                pins,
                m.interface.as_str()
            ));
        }
        out
    }

    /// Serializes back to the config schema. `parse_hardware_config` of the
    /// result yields an equal value.
    pub fn to_document(&self, task: Option<&TaskSpec>) -> String {
        let raw = RawConfig {
            schema_version: Some(CONFIG_SCHEMA_VERSION),
            platform: Some(RawPlatform {
                name: Some(self.platform_name.clone()),
                arch: Some(self.platform_arch.clone()),
                board_id: Some(self.toolchain_board_id.clone()),
                port: self.port.clone(),
            }),
            modules: Some(
                self.modules
                    .iter()
                    .map(|m| RawModule {
                        name: Some(m.component_name.clone()),
                        pins: Some(m.pins.clone()),
                        interface: Some(m.interface),
                    })
                    .collect(),
            ),
            task: task.map(|t| RawTask {
                description: Some(t.description.clone()),
                reference: t.reference_api_sequence.clone(),
                functionalities: t.expected_functionality_count,
            }),
            secrets: if self.secrets.is_empty() {
                None
            } else {
                Some(self.secrets.clone())
            },
        };
        toml::to_string(&raw).expect("config document is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.platform_name.trim().is_empty() {
            return Err(Error::schema("platform.name", "must be non-empty"));
        }
        if self.platform_arch.trim().is_empty() {
            return Err(Error::schema("platform.arch", "must be non-empty"));
        }
        let mut seen = BTreeSet::new();
        for (i, m) in self.modules.iter().enumerate() {
            if m.component_name.trim().is_empty() {
                return Err(Error::schema(format!("modules[{i}].name"), "must be non-empty"));
            }
            if m.pins.is_empty() && m.interface != Interface::Onboard {
                return Err(Error::schema(
                    format!("modules[{i}].pins"),
                    "may be empty only for onboard modules",
                ));
            }
            if !seen.insert(m.component_name.to_lowercase()) {
                return Err(Error::schema(
                    format!("modules[{i}].name"),
                    format!("module `{}` declared more than once", m.component_name),
                ));
            }
        }
        check_pin_conflicts(&self.modules)
    }
}

/// Reports the first conflicting pair in a canonical order (pin label,
/// then module names), so the verdict and the message do not depend on
/// declaration order.
fn check_pin_conflicts(modules: &[ModuleBinding]) -> Result<()> {
    let mut claims: BTreeMap<String, Vec<&ModuleBinding>> = BTreeMap::new();
    for m in modules {
        let pins: BTreeSet<String> = m.pins.iter().map(|p| normalize_pin(p)).collect();
        for pin in pins {
            claims.entry(pin).or_default().push(m);
        }
    }
    for (pin, mut holders) in claims {
        holders.sort_by(|a, b| a.component_name.cmp(&b.component_name));
        for (i, a) in holders.iter().enumerate() {
            for b in &holders[i + 1..] {
                if !(a.interface.is_shared_bus() && b.interface.is_shared_bus()) {
                    return Err(Error::PinConflict {
                        pin,
                        first: a.component_name.clone(),
                        second: b.component_name.clone(),
                    });
                }
            }
        }
    }
    Ok(())
}

fn normalize_pin(pin: &str) -> String {
    pin.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub description: String,
    pub reference_api_sequence: Option<Vec<String>>,
    pub expected_functionality_count: Option<u32>,
}

pub fn parse_task(text: &str, reference: Option<Vec<String>>) -> Result<TaskSpec> {
    if text.trim().is_empty() {
        return Err(Error::Validation("task description must be non-empty".into()));
    }
    Ok(TaskSpec {
        description: text.to_string(),
        reference_api_sequence: reference,
        expected_functionality_count: None,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    platform: Option<RawPlatform>,
    modules: Option<Vec<RawModule>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    task: Option<RawTask>,
    #[serde(skip_serializing_if = "Option::is_none")]
    secrets: Option<Vec<DeclaredSecret>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlatform {
    name: Option<String>,
    arch: Option<String>,
    board_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    port: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModule {
    name: Option<String>,
    pins: Option<Vec<String>>,
    interface: Option<Interface>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    description: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    functionalities: Option<u32>,
}

/// A parsed config file: the hardware plus the optional embedded task.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDocument {
    pub hardware: HardwareConfig,
    pub task: Option<TaskSpec>,
}

impl ConfigDocument {
    pub fn parse(document: &str) -> Result<Self> {
        let value: toml::Value =
            toml::from_str(document).map_err(|e| Error::schema("<document>", e.message()))?;
        let raw: RawConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::schema(path, e.into_inner().to_string())
        })?;

        let version = raw
            .schema_version
            .ok_or_else(|| Error::schema("schema_version", "missing"))?;
        if version > CONFIG_SCHEMA_VERSION {
            return Err(Error::schema(
                "schema_version",
                format!("version {version} is newer than supported {CONFIG_SCHEMA_VERSION}"),
            ));
        }
        let platform = raw
            .platform
            .ok_or_else(|| Error::schema("platform", "missing"))?;
        let platform_name = platform
            .name
            .ok_or_else(|| Error::schema("platform.name", "missing"))?;
        let platform_arch = platform
            .arch
            .ok_or_else(|| Error::schema("platform.arch", "missing"))?;
        let toolchain_board_id = platform
            .board_id
            .ok_or_else(|| Error::schema("platform.board_id", "missing"))?;

        let mut modules = Vec::new();
        for (i, m) in raw.modules.unwrap_or_default().into_iter().enumerate() {
            modules.push(ModuleBinding {
                component_name: m
                    .name
                    .ok_or_else(|| Error::schema(format!("modules[{i}].name"), "missing"))?,
                pins: m.pins.unwrap_or_default(),
                interface: m
                    .interface
                    .ok_or_else(|| Error::schema(format!("modules[{i}].interface"), "missing"))?,
            });
        }

        let hardware = HardwareConfig {
            platform_name,
            platform_arch,
            toolchain_board_id,
            port: platform.port,
            modules,
            secrets: raw.secrets.unwrap_or_default(),
        };
        hardware.validate()?;

        let task = match raw.task {
            None => None,
            Some(t) => {
                let description = t
                    .description
                    .ok_or_else(|| Error::schema("task.description", "missing"))?;
                let mut spec = parse_task(&description, t.reference)
                    .map_err(|_| Error::schema("task.description", "must be non-empty"))?;
                spec.expected_functionality_count = t.functionalities;
                Some(spec)
            }
        };
        Ok(ConfigDocument { hardware, task })
    }
}

impl ConfigDocument {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

pub fn parse_hardware_config(document: &str) -> Result<HardwareConfig> {
    ConfigDocument::parse(document).map(|d| d.hardware)
}
