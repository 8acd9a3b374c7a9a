//! Host side of the system: the register transformation table (RTT) that
//! turns command opcodes into control vectors, and the text command script.
//!
//! Script grammar: one command per line, `OPCODE arg0 arg1 ...`, all numbers
//! hexadecimal with an optional `0x` prefix; `#` starts a comment. Positional
//! arguments override the RTT entry fields in the order
//! `mask ext_base sm_base length mode`. Opcode `0F` is handled by the bridge
//! itself and writes an RTT entry: `0F opcode action [mask ext sm length mode]`.

use std::fmt;

use thiserror::Error;

pub const RTT_CAPACITY: usize = 16;
pub const RTT_WRITE_OPCODE: u8 = 0x0F;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    LoadConfig,
    LoadData,
    Launch,
    StoreResults,
    CpeConfig,
    Sync,
    Toggle,
    SetPingpong,
}

impl Action {
    pub const ALL: [Action; 8] = [
        Action::LoadConfig,
        Action::LoadData,
        Action::Launch,
        Action::StoreResults,
        Action::CpeConfig,
        Action::Sync,
        Action::Toggle,
        Action::SetPingpong,
    ];

    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Action> {
        Action::ALL.get(usize::from(code).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::LoadConfig => "load_config",
            Action::LoadData => "load_data",
            Action::Launch => "launch",
            Action::StoreResults => "store_results",
            Action::CpeConfig => "cpe_config",
            Action::Sync => "sync",
            Action::Toggle => "toggle",
            Action::SetPingpong => "set_pingpong",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What an RTT entry expands to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlVector {
    pub action: Action,
    /// Bit `r` targets RPU `r`.
    pub mask: u32,
    pub ext_base: u32,
    pub sm_base: u32,
    pub length: u32,
    pub mode: u32,
}

impl ControlVector {
    pub fn new(action: Action) -> Self {
        ControlVector { action, mask: 1, ext_base: 0, sm_base: 0, length: 0, mode: 0 }
    }

    fn with_args(mut self, args: &[u32]) -> Self {
        let fields = [&mut self.mask, &mut self.ext_base, &mut self.sm_base, &mut self.length, &mut self.mode];
        for (f, &a) in fields.into_iter().zip(args) {
            *f = a;
        }
        self
    }

    /// Vector for the `index`-th instance of a repeated action: external
    /// (or configuration store) base advances by whole lengths.
    pub fn indexed(mut self, index: u32) -> Self {
        self.ext_base = self.ext_base.wrapping_add(index.wrapping_mul(self.length));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HostError {
    #[error("opcode {0:#04x} not in the RTT")]
    UnknownOpcode(u8),
    #[error("RTT full ({RTT_CAPACITY} entries)")]
    RttFull,
    #[error("unknown action code {0:#x}")]
    UnknownAction(u32),
    #[error("script line {line}: {message}")]
    Script { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RttEntry {
    pub opcode: u8,
    pub vector: ControlVector,
}

/// Register transformation table; opcodes are unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rtt {
    entries: Vec<RttEntry>,
}

impl Default for Rtt {
    /// Opcodes 0x01..=0x08 map to the actions in declaration order.
    fn default() -> Self {
        Rtt {
            entries: Action::ALL
                .iter()
                .map(|&a| RttEntry { opcode: a.code(), vector: ControlVector::new(a) })
                .collect(),
        }
    }
}

impl Rtt {
    pub fn empty() -> Self {
        Rtt { entries: Vec::new() }
    }

    pub fn entries(&self) -> &[RttEntry] {
        &self.entries
    }

    /// Inserts or replaces the entry for `opcode`.
    pub fn write(&mut self, opcode: u8, vector: ControlVector) -> Result<(), HostError> {
        if let Some(e) = self.entries.iter_mut().find(|e| e.opcode == opcode) {
            e.vector = vector;
            return Ok(());
        }
        if self.entries.len() == RTT_CAPACITY {
            return Err(HostError::RttFull);
        }
        self.entries.push(RttEntry { opcode, vector });
        Ok(())
    }

    pub fn lookup(&self, opcode: u8) -> Option<&ControlVector> {
        self.entries.iter().find(|e| e.opcode == opcode).map(|e| &e.vector)
    }

    /// Expands a command, substituting its operands into the stored vector.
    pub fn decode(&self, cmd: &HostCommand) -> Result<ControlVector, HostError> {
        let base = self.lookup(cmd.opcode).ok_or(HostError::UnknownOpcode(cmd.opcode))?;
        Ok(base.with_args(&cmd.args))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostCommand {
    pub opcode: u8,
    pub args: Vec<u32>,
}

impl HostCommand {
    pub fn new(opcode: u8, args: &[u32]) -> Self {
        HostCommand { opcode, args: args.to_vec() }
    }

    pub fn action(action: Action, args: &[u32]) -> Self {
        Self::new(action.code(), args)
    }

    pub fn is_rtt_write(&self) -> bool {
        self.opcode == RTT_WRITE_OPCODE
    }

    /// Entry written by an `0F` command.
    pub fn rtt_write_entry(&self) -> Result<(u8, ControlVector), HostError> {
        let bad = |m: &str| HostError::Script { line: 0, message: m.into() };
        let (&op, rest) = self.args.split_first().ok_or_else(|| bad("rtt write needs an opcode"))?;
        let (&action, rest) = rest.split_first().ok_or_else(|| bad("rtt write needs an action"))?;
        let op = u8::try_from(op).map_err(|_| bad("rtt opcode exceeds 8 bits"))?;
        if op == RTT_WRITE_OPCODE {
            return Err(bad("opcode 0F is reserved"));
        }
        let action = u8::try_from(action).ok().and_then(Action::from_code).ok_or(HostError::UnknownAction(action))?;
        Ok((op, ControlVector::new(action).with_args(rest)))
    }
}

impl fmt::Display for HostCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02X}", self.opcode)?;
        for a in &self.args {
            write!(f, " {a:X}")?;
        }
        Ok(())
    }
}

fn parse_hex(tok: &str) -> Option<u32> {
    let t = tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")).unwrap_or(tok);
    u32::from_str_radix(t, 16).ok()
}

pub fn parse_script(text: &str) -> Result<Vec<HostCommand>, HostError> {
    let mut cmds = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| HostError::Script { line: i + 1, message };
        let mut nums = Vec::new();
        for tok in line.split_whitespace() {
            nums.push(parse_hex(tok).ok_or_else(|| err(format!("bad hex number `{tok}`")))?);
        }
        let opcode = u8::try_from(nums[0]).map_err(|_| err(format!("opcode {:#x} exceeds 8 bits", nums[0])))?;
        if nums.len() > 8 {
            return Err(err("too many operands".into()));
        }
        let cmd = HostCommand { opcode, args: nums[1..].to_vec() };
        if cmd.is_rtt_write() {
            cmd.rtt_write_entry().map_err(|e| match e {
                HostError::Script { message, .. } => err(message),
                other => other,
            })?;
        }
        cmds.push(cmd);
    }
    Ok(cmds)
}

pub fn format_script(cmds: &[HostCommand]) -> String {
    cmds.iter().map(|c| format!("{c}\n")).collect()
}

/// The four-step boot sequence for the RPUs in `mask`: configure, stage
/// `data_len` input words at SM 0, run, and drain `[out_base, out_base+out_len)`.
pub fn boot_script(mask: u32, data_len: u32, out_base: u32, out_len: u32) -> Vec<HostCommand> {
    vec![
        HostCommand::action(Action::LoadConfig, &[mask, 0, 0, 0]),
        HostCommand::action(Action::LoadData, &[mask, 0, 0, data_len]),
        HostCommand::action(Action::Launch, &[mask]),
        HostCommand::action(Action::StoreResults, &[mask, 0, out_base, out_len]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_decodes() {
        let rtt = Rtt::default();
        let v = rtt.decode(&HostCommand::new(0x01, &[])).unwrap();
        assert_eq!(v.action, Action::LoadConfig);
        assert_eq!(rtt.decode(&HostCommand::new(0x42, &[])), Err(HostError::UnknownOpcode(0x42)));
    }

    #[test]
    fn boot_sequence_decodes_in_protocol_order() {
        let rtt = Rtt::default();
        let actions: Vec<Action> = boot_script(1, 8, 16, 4).iter().map(|c| rtt.decode(c).unwrap().action).collect();
        assert_eq!(actions, vec![Action::LoadConfig, Action::LoadData, Action::Launch, Action::StoreResults]);
    }

    #[test]
    fn operands_override_entry_fields() {
        let mut rtt = Rtt::default();
        let mut stored = ControlVector::new(Action::LoadData);
        stored.length = 64;
        stored.sm_base = 5;
        rtt.write(0x20, stored).unwrap();
        let v = rtt.decode(&HostCommand::new(0x20, &[0x3, 0x10])).unwrap();
        assert_eq!((v.mask, v.ext_base, v.sm_base, v.length), (3, 0x10, 5, 64));
        assert_eq!(v.indexed(2).ext_base, 0x10 + 128);
    }

    #[test]
    fn table_is_bounded_and_unique() {
        let mut rtt = Rtt::default();
        for op in 0x10..0x18 {
            rtt.write(op, ControlVector::new(Action::Sync)).unwrap();
        }
        assert_eq!(rtt.entries().len(), RTT_CAPACITY);
        assert_eq!(rtt.write(0x30, ControlVector::new(Action::Sync)), Err(HostError::RttFull));
        rtt.write(0x01, ControlVector::new(Action::Sync)).unwrap();
        assert_eq!(rtt.entries().len(), RTT_CAPACITY);
    }

    #[test]
    fn script_round_trip_and_errors() {
        let text = "# boot\n01 1\n0x02 1 0 0 40  # stage\n\n0F 21 2 1 0 0 8\n";
        let cmds = parse_script(text).unwrap();
        assert_eq!(cmds.len(), 3);
        assert_eq!(cmds[1].args, vec![1, 0, 0, 0x40]);
        assert_eq!(parse_script(&format_script(&cmds)).unwrap(), cmds);
        assert!(matches!(parse_script("01\nzz"), Err(HostError::Script { line: 2, .. })));
        assert!(matches!(parse_script("0F 21 9"), Err(HostError::UnknownAction(9))));
        assert!(matches!(parse_script("100"), Err(HostError::Script { line: 1, .. })));
    }
}
