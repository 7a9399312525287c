//! Discrete-event model of the machine to Smart-eNodeB handshake on a
//! licensed anchor carrier with hand-over to an unlicensed carrier, plus the
//! DRX battery-lifetime model.
//!
//! Time is an integer tick of one millisecond. Events fire in
//! `(tick, endpoint, kind rank, insertion order)` order, so a scenario and a
//! seed fully determine the trace.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::time::Duration;

use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::rng::{derive_seed, rng_from, tag, SimRng};
use crate::sigmodel::{linear_to_db, synth_narrowband, NarrowbandKind, NOISE_POWER};

pub type Tick = u64;

/// Longest DRX cycle accepted without the extended flag, in ticks.
pub const MAX_DRX_CYCLE: Tick = 2_560;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtoError {
    #[error("no licensed carrier configured")]
    NoLicensedCarrier,
    #[error("unknown carrier {0}")]
    UnknownCarrier(String),
    #[error("unknown machine {0}")]
    UnknownMachine(String),
    #[error("carrier {0} has not been announced to neighboring S-eNodeBs")]
    Unannounced(String),
    #[error("carrier {0} is licensed and cannot be announced")]
    LicensedAnnouncement(String),
    #[error("machine {machine} is {phase} at tick {at}; a measurement gap needs it connected")]
    NotConnected { machine: String, phase: Phase, at: Tick },
    #[error("tick {at} is earlier than the simulation clock {now}")]
    InPast { at: Tick, now: Tick },
    #[error("invalid carrier {id}: {reason}")]
    BadCarrier { id: String, reason: String },
    #[error("invalid DRX configuration: {0}")]
    BadDrx(String),
    #[error("invalid power constants: {0}")]
    BadPower(String),
    #[error("duty cycle must lie in [0, 1], got {0}")]
    BadDuty(f64),
    #[error("invalid scenario: {0}")]
    BadScenario(String),
}

pub type Result<T> = std::result::Result<T, ProtoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Licensed,
    Unlicensed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
pub enum Modulation {
    #[default]
    #[serde(rename = "qpsk")]
    Qpsk,
    #[serde(rename = "16qam")]
    Qam16,
    #[serde(rename = "64qam")]
    Qam64,
}

impl Modulation {
    pub fn name(self) -> &'static str {
        match self {
            Modulation::Qpsk => "qpsk",
            Modulation::Qam16 => "16qam",
            Modulation::Qam64 => "64qam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
pub enum Coding {
    #[default]
    #[serde(rename = "1/3")]
    Rate1_3,
    #[serde(rename = "1/2")]
    Rate1_2,
    #[serde(rename = "2/3")]
    Rate2_3,
    #[serde(rename = "3/4")]
    Rate3_4,
}

impl Coding {
    pub fn name(self) -> &'static str {
        match self {
            Coding::Rate1_3 => "1/3",
            Coding::Rate1_2 => "1/2",
            Coding::Rate2_3 => "2/3",
            Coding::Rate3_4 => "3/4",
        }
    }
}

/// Everything a machine needs to camp on a carrier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CarrierDescriptor {
    pub carrier_id: String,
    pub band: Band,
    pub modulation: Modulation,
    pub coding: Coding,
    /// Offset from the licensed frame clock; `None` on licensed carriers.
    pub relative_timing: Option<Tick>,
    /// Highest tolerance class this carrier is suitable for.
    pub serves_class: u32,
}

impl CarrierDescriptor {
    pub fn is_unlicensed(&self) -> bool {
        self.band == Band::Unlicensed
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| ProtoError::BadCarrier {
            id: self.carrier_id.clone(),
            reason: reason.into(),
        };
        match (self.band, self.relative_timing) {
            (Band::Licensed, Some(_)) => Err(bad("relative timing is only defined for unlicensed carriers")),
            (Band::Unlicensed, None) => Err(bad("unlicensed carrier needs a relative timing")),
            _ if self.carrier_id.is_empty() || self.carrier_id.contains(char::is_whitespace) => {
                Err(bad("identifier must be non-empty without whitespace"))
            }
            _ => Ok(()),
        }
    }

    fn summary(&self) -> String {
        let timing = self
            .relative_timing
            .map_or_else(|| "-".to_string(), |t| t.to_string());
        format!(
            "target={} band={} mod={} coding={} timing={} class={}",
            self.carrier_id,
            match self.band {
                Band::Licensed => "licensed",
                Band::Unlicensed => "unlicensed",
            },
            self.modulation.name(),
            self.coding.name(),
            timing,
            self.serves_class
        )
    }
}

/// Group identity reported by a machine; lower classes tolerate less.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GroupId {
    pub id: u32,
    pub tolerance_class: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Off,
    Calibrating,
    Scanning,
    SyncedLicensed,
    RandomAccessLicensed,
    ReportingGroupId,
    Switching,
    SyncedUnlicensed,
    RandomAccessUnlicensed,
    Connected,
    MeasurementGap,
    DrxSleep,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Off => "off",
            Phase::Calibrating => "calibrating",
            Phase::Scanning => "scanning",
            Phase::SyncedLicensed => "synced_licensed",
            Phase::RandomAccessLicensed => "random_access_licensed",
            Phase::ReportingGroupId => "reporting_group_id",
            Phase::Switching => "switching",
            Phase::SyncedUnlicensed => "synced_unlicensed",
            Phase::RandomAccessUnlicensed => "random_access_unlicensed",
            Phase::Connected => "connected",
            Phase::MeasurementGap => "measurement_gap",
            Phase::DrxSleep => "drx_sleep",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementReport {
    pub machine: String,
    pub target: String,
    pub power_dbm: f64,
    pub at: Tick,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    pub phase: Phase,
    pub current_carrier: Option<CarrierDescriptor>,
    pub pending_report: Option<MeasurementReport>,
}

/// Audit record kept by the S-eNodeB in the order things happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditEntry {
    Announced { carrier: String, at: Tick },
    Allocated { machine: String, carrier: String, at: Tick },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeNodeBState {
    pub known_carriers: BTreeMap<String, CarrierDescriptor>,
    pub allocations: BTreeMap<String, String>,
    pub neighbor_announcements: BTreeSet<String>,
    pub sensing_reports: Vec<MeasurementReport>,
    pub audit: Vec<AuditEntry>,
}

impl SeNodeBState {
    fn announce(&mut self, carrier: &str, at: Tick) -> Result<()> {
        let desc = self
            .known_carriers
            .get(carrier)
            .ok_or_else(|| ProtoError::UnknownCarrier(carrier.into()))?;
        if !desc.is_unlicensed() {
            return Err(ProtoError::LicensedAnnouncement(carrier.into()));
        }
        if self.neighbor_announcements.insert(carrier.into()) {
            self.audit.push(AuditEntry::Announced {
                carrier: carrier.into(),
                at,
            });
        }
        Ok(())
    }

    fn allocate(&mut self, machine: &str, carrier: &str, at: Tick) {
        self.allocations.insert(machine.into(), carrier.into());
        self.audit.push(AuditEntry::Allocated {
            machine: machine.into(),
            carrier: carrier.into(),
            at,
        });
    }

    /// Unlicensed carrier with the largest class not above `class`, ties to
    /// the smallest id.
    fn select_carrier(&self, class: u32) -> Option<&CarrierDescriptor> {
        self.known_carriers
            .values()
            .filter(|c| c.is_unlicensed() && c.serves_class <= class)
            .fold(None, |best: Option<&CarrierDescriptor>, c| match best {
                Some(b) if b.serves_class >= c.serves_class => Some(b),
                _ => Some(c),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    Scanning,
    SyncAcquired,
    MibDecoded,
    RandomAccessRequest,
    GroupIdRequest,
    GroupIdReport,
    CarrierSwitchCommand,
    DataGrant,
    DataExchange,
    MeasurementGapCommand,
    MeasurementReport,
    CarrierChangeCommand,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Scanning => "scanning",
            MessageKind::SyncAcquired => "sync_acquired",
            MessageKind::MibDecoded => "mib_decoded",
            MessageKind::RandomAccessRequest => "random_access_request",
            MessageKind::GroupIdRequest => "group_id_request",
            MessageKind::GroupIdReport => "group_id_report",
            MessageKind::CarrierSwitchCommand => "carrier_switch_command",
            MessageKind::DataGrant => "data_grant",
            MessageKind::DataExchange => "data_exchange",
            MessageKind::MeasurementGapCommand => "measurement_gap_command",
            MessageKind::MeasurementReport => "measurement_report",
            MessageKind::CarrierChangeCommand => "carrier_change_command",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    None,
    Cell { cell_id: u32 },
    Group(GroupId),
    Carrier(CarrierDescriptor),
    Data { bytes: u32 },
    Gap { target: String, duration: Tick },
    Report(MeasurementReport),
}

impl Payload {
    fn summary(&self) -> String {
        match self {
            Payload::None => String::new(),
            Payload::Cell { cell_id } => format!("cell={cell_id}"),
            Payload::Group(g) => format!("group={} class={}", g.id, g.tolerance_class),
            Payload::Carrier(c) => c.summary(),
            Payload::Data { bytes } => format!("bytes={bytes}"),
            Payload::Gap { target, duration } => format!("target={target} gap={duration}"),
            Payload::Report(r) => format!("target={} power_dbm={:.2}", r.target, r.power_dbm),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub time: Tick,
    pub kind: MessageKind,
    pub from: String,
    pub to: String,
    /// Carrier the message travels on.
    pub carrier: String,
    pub payload: Payload,
}

impl Message {
    /// `time kind from to payload-summary`
    pub fn to_line(&self) -> String {
        let extra = self.payload.summary();
        let mut line = format!(
            "{} {} {} {} carrier={}",
            self.time, self.kind, self.from, self.to, self.carrier
        );
        if !extra.is_empty() {
            line.push(' ');
            line.push_str(&extra);
        }
        line
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.time,
            self.kind,
            self.from,
            self.to,
            self.carrier,
            self.payload.summary()
        )
    }

    /// The machine endpoint of the message.
    pub fn machine(&self) -> &str {
        if self.from.starts_with("enb:") {
            &self.to
        } else {
            &self.from
        }
    }
}

pub fn format_trace(trace: &[Message]) -> String {
    trace.iter().map(|m| m.to_line() + "\n").collect()
}

pub fn format_trace_tsv(trace: &[Message]) -> String {
    let mut out = String::from("time\tkind\tfrom\tto\tcarrier\tpayload\n");
    for m in trace {
        out.push_str(&m.to_tsv());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrxConfig {
    pub cycle_period: Tick,
    pub on_duration: Tick,
    #[serde(default)]
    pub wakeup_margin: Tick,
    #[serde(default)]
    pub extended: bool,
}

impl DrxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cycle_period == 0 {
            return Err(ProtoError::BadDrx("cycle period must be positive".into()));
        }
        if self.on_duration == 0 {
            return Err(ProtoError::BadDrx("on duration must be positive".into()));
        }
        if self.on_duration + self.wakeup_margin > self.cycle_period {
            return Err(ProtoError::BadDrx(format!(
                "on duration {} plus wake-up margin {} exceeds the cycle {}",
                self.on_duration, self.wakeup_margin, self.cycle_period
            )));
        }
        if self.cycle_period > MAX_DRX_CYCLE && !self.extended {
            return Err(ProtoError::BadDrx(format!(
                "cycle {} ms exceeds {MAX_DRX_CYCLE} ms without the extended flag",
                self.cycle_period
            )));
        }
        Ok(())
    }

    /// Fraction of each cycle with the radio on, wake-up margin included.
    pub fn duty_cycle(&self) -> f64 {
        (self.on_duration + self.wakeup_margin) as f64 / self.cycle_period as f64
    }

    fn sleep_len(&self) -> Tick {
        self.cycle_period - self.on_duration - self.wakeup_margin
    }
}

/// Battery and radio power figures, in mWh and mW.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerConstants {
    pub battery_capacity_mwh: f64,
    pub active_power_mw: f64,
    pub sleep_power_mw: f64,
}

impl Default for PowerConstants {
    /// A 2000 mAh cell at 1.5 V, with the active draw set so that an
    /// always-on radio empties it in seven days.
    fn default() -> Self {
        let battery = 2_000.0 * 1.5;
        Self {
            battery_capacity_mwh: battery,
            active_power_mw: battery / (7.0 * 24.0),
            sleep_power_mw: 0.015,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lifetime {
    Finite(Duration),
    Unbounded,
}

impl Lifetime {
    pub fn days(&self) -> f64 {
        match self {
            Lifetime::Finite(d) => d.as_secs_f64() / 86_400.0,
            Lifetime::Unbounded => f64::INFINITY,
        }
    }
}

/// Radio on-time bookkeeping for one machine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLedger {
    pub radio_on_time: Duration,
    pub total_time: Duration,
    pub constants: PowerConstants,
}

impl PowerLedger {
    pub fn duty_cycle(&self) -> f64 {
        if self.total_time.is_zero() {
            0.0
        } else {
            self.radio_on_time.as_secs_f64() / self.total_time.as_secs_f64()
        }
    }

    pub fn lifetime(&self) -> Result<Lifetime> {
        lifetime_at_duty(self.duty_cycle(), &self.constants)
    }
}

/// Battery lifetime at a given radio duty cycle.
pub fn lifetime_at_duty(duty: f64, powers: &PowerConstants) -> Result<Lifetime> {
    if !(0.0..=1.0).contains(&duty) {
        return Err(ProtoError::BadDuty(duty));
    }
    let PowerConstants {
        battery_capacity_mwh: battery,
        active_power_mw: active,
        sleep_power_mw: sleep,
    } = *powers;
    if !(battery > 0.0 && battery.is_finite()) {
        return Err(ProtoError::BadPower(format!("battery capacity {battery} must be positive")));
    }
    if active == 0.0 && sleep == 0.0 {
        return Ok(Lifetime::Unbounded);
    }
    if !(sleep >= 0.0 && active > sleep && active.is_finite()) {
        return Err(ProtoError::BadPower(format!(
            "need active power > sleep power >= 0, got {active} and {sleep}"
        )));
    }
    let draw = duty * active + (1.0 - duty) * sleep;
    if draw == 0.0 {
        return Ok(Lifetime::Unbounded);
    }
    Ok(Lifetime::Finite(Duration::from_secs_f64(battery / draw * 3_600.0)))
}

pub fn drx_lifetime(drx: &DrxConfig, powers: &PowerConstants) -> Result<Lifetime> {
    drx.validate()?;
    lifetime_at_duty(drx.duty_cycle(), powers)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub calibration: Tick,
    pub scan: Tick,
    pub sync: Tick,
    pub mib: Tick,
    pub random_access: Tick,
    pub group_request: Tick,
    pub group_report: Tick,
    pub switch: Tick,
    pub grant: Tick,
    pub data: Tick,
    /// Uniform extra delay in `0..=jitter` added to every step.
    pub jitter: Tick,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            calibration: 5,
            scan: 20,
            sync: 10,
            mib: 10,
            random_access: 5,
            group_request: 2,
            group_report: 2,
            switch: 4,
            grant: 3,
            data: 5,
            jitter: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarrierSpec {
    pub band: Band,
    #[serde(default)]
    pub modulation: Modulation,
    #[serde(default)]
    pub coding: Coding,
    #[serde(default)]
    pub relative_timing: Option<Tick>,
    #[serde(default)]
    pub serves_class: u32,
    /// SNR of an incumbent on this carrier; absent means vacant.
    #[serde(default)]
    pub occupancy_snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSpec {
    pub group: u32,
    pub class: u32,
    #[serde(default = "yes")]
    pub powered_on: bool,
    #[serde(default)]
    pub start: Tick,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapSpec {
    pub machine: String,
    pub target: String,
    pub at: Tick,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChangeSpec {
    pub from: String,
    pub to: String,
    pub at: Tick,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnounceSpec {
    pub carrier: String,
    pub at: Tick,
}

/// Scenario description: carriers, machines and scripted operations.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub enodeb: String,
    pub cell_id: u32,
    pub noise_floor_dbm: f64,
    pub gap_len: Tick,
    pub gap_samples: usize,
    pub data_bytes: u32,
    pub horizon: Tick,
    pub timing: TimingConfig,
    pub carrier: BTreeMap<String, CarrierSpec>,
    pub machine: BTreeMap<String, MachineSpec>,
    pub drx: Option<DrxConfig>,
    pub gap: BTreeMap<String, GapSpec>,
    pub change: BTreeMap<String, ChangeSpec>,
    pub announce: BTreeMap<String, AnnounceSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let mut carrier = BTreeMap::new();
        carrier.insert(
            "L1".into(),
            CarrierSpec {
                band: Band::Licensed,
                modulation: Modulation::Qpsk,
                coding: Coding::Rate1_3,
                relative_timing: None,
                serves_class: 0,
                occupancy_snr_db: None,
            },
        );
        carrier.insert(
            "U1".into(),
            CarrierSpec {
                band: Band::Unlicensed,
                modulation: Modulation::Qam16,
                coding: Coding::Rate1_2,
                relative_timing: Some(2),
                serves_class: 1,
                occupancy_snr_db: None,
            },
        );
        let mut machine = BTreeMap::new();
        machine.insert(
            "M1".into(),
            MachineSpec {
                group: 1,
                class: 1,
                powered_on: true,
                start: 0,
            },
        );
        Self {
            enodeb: "S1".into(),
            cell_id: 101,
            noise_floor_dbm: -100.0,
            gap_len: 6,
            gap_samples: 1024,
            data_bytes: 256,
            horizon: 10_000,
            timing: TimingConfig::default(),
            carrier,
            machine,
            drx: None,
            gap: BTreeMap::new(),
            change: BTreeMap::new(),
            announce: BTreeMap::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn descriptors(&self) -> Result<Vec<CarrierDescriptor>> {
        self.carrier
            .iter()
            .map(|(id, spec)| {
                let relative_timing = match spec.band {
                    Band::Licensed => spec.relative_timing,
                    Band::Unlicensed => spec.relative_timing.or(Some(0)),
                };
                let d = CarrierDescriptor {
                    carrier_id: id.clone(),
                    band: spec.band,
                    modulation: spec.modulation,
                    coding: spec.coding,
                    relative_timing,
                    serves_class: spec.serves_class,
                };
                d.validate()?;
                Ok(d)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let carriers = self.descriptors()?;
        if !carriers.iter().any(|c| c.band == Band::Licensed) {
            return Err(ProtoError::NoLicensedCarrier);
        }
        if let Some(drx) = &self.drx {
            drx.validate()?;
        }
        if self.gap_samples == 0 || self.gap_samples % 32 != 0 {
            return Err(ProtoError::BadScenario("gap_samples must be a positive multiple of 32".into()));
        }
        for id in self.machine.keys() {
            if id.is_empty() || id.contains(char::is_whitespace) || id.starts_with("enb:") {
                return Err(ProtoError::BadScenario(format!("bad machine id {id:?}")));
            }
        }
        let known = |c: &str| {
            self.carrier
                .contains_key(c)
                .then_some(())
                .ok_or_else(|| ProtoError::UnknownCarrier(c.into()))
        };
        for g in self.gap.values() {
            known(&g.target)?;
            if !self.machine.contains_key(&g.machine) {
                return Err(ProtoError::UnknownMachine(g.machine.clone()));
            }
        }
        for c in self.change.values() {
            known(&c.from)?;
            known(&c.to)?;
        }
        for a in self.announce.values() {
            known(&a.carrier)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Action {
    PowerOn,
    CalibrationDone,
    Synced(String),
    Mib,
    RandomAccess(String),
    GroupRequest,
    GroupReport,
    SwitchCommand(String),
    Grant(String),
    Data(String),
    Sleep,
    Wake,
    GapEnd(String),
}

impl Action {
    fn rank(&self) -> u8 {
        match self {
            Action::PowerOn => 0,
            Action::CalibrationDone => 1,
            Action::Synced(_) => 2,
            Action::Mib => 3,
            Action::RandomAccess(_) => 4,
            Action::GroupRequest => 5,
            Action::GroupReport => 6,
            Action::SwitchCommand(_) => 7,
            Action::Grant(_) => 8,
            Action::Data(_) => 9,
            Action::GapEnd(_) => 10,
            Action::Sleep => 11,
            Action::Wake => 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Event {
    tick: Tick,
    endpoint: usize,
    rank: u8,
    seq: u64,
    epoch: u64,
    action: Action,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.tick, self.endpoint, self.rank, self.seq).cmp(&(other.tick, other.endpoint, other.rank, other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct Machine {
    id: String,
    group: GroupId,
    state: MachineState,
    epoch: u64,
    group_reported: bool,
    pending_change: Option<String>,
    powered_at: Option<Tick>,
    on_since: Option<Tick>,
    on_time: Tick,
}

/// Single-threaded event loop over one S-eNodeB and its machines.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: ScenarioConfig,
    seed: u64,
    enb: String,
    anchor: String,
    machines: Vec<Machine>,
    enodeb: SeNodeBState,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: Tick,
    rng: SimRng,
    trace: Vec<Message>,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let carriers = cfg.descriptors()?;
        let anchor = carriers
            .iter()
            .find(|c| c.band == Band::Licensed)
            .map(|c| c.carrier_id.clone())
            .ok_or(ProtoError::NoLicensedCarrier)?;
        let enodeb = SeNodeBState {
            known_carriers: carriers.into_iter().map(|c| (c.carrier_id.clone(), c)).collect(),
            ..SeNodeBState::default()
        };
        let machines = cfg
            .machine
            .iter()
            .map(|(id, spec)| Machine {
                id: id.clone(),
                group: GroupId {
                    id: spec.group,
                    tolerance_class: spec.class,
                },
                state: MachineState {
                    phase: Phase::Off,
                    current_carrier: None,
                    pending_report: None,
                },
                epoch: 0,
                group_reported: false,
                pending_change: None,
                powered_at: None,
                on_since: None,
                on_time: 0,
            })
            .collect();
        let mut sim = Self {
            cfg: cfg.clone(),
            seed,
            enb: format!("enb:{}", cfg.enodeb),
            anchor,
            machines,
            enodeb,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            rng: rng_from(derive_seed(seed, &[tag("protosim")])),
            trace: Vec::new(),
        };
        for (i, spec) in cfg.machine.values().enumerate() {
            if spec.powered_on {
                sim.push(i, spec.start, Action::PowerOn);
            }
        }
        Ok(sim)
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn trace(&self) -> &[Message] {
        &self.trace
    }

    pub fn enodeb(&self) -> &SeNodeBState {
        &self.enodeb
    }

    pub fn machine_ids(&self) -> Vec<String> {
        self.machines.iter().map(|m| m.id.clone()).collect()
    }

    pub fn machine_state(&self, machine: &str) -> Result<&MachineState> {
        Ok(&self.machines[self.index(machine)?].state)
    }

    /// Radio on-time of one machine from power-on to the current clock.
    pub fn power_ledger(&self, machine: &str, constants: &PowerConstants) -> Result<PowerLedger> {
        let m = &self.machines[self.index(machine)?];
        let open = m.on_since.map_or(0, |s| self.now.saturating_sub(s));
        let total = m.powered_at.map_or(0, |p| self.now.saturating_sub(p));
        Ok(PowerLedger {
            radio_on_time: Duration::from_millis(m.on_time + open),
            total_time: Duration::from_millis(total),
            constants: *constants,
        })
    }

    fn index(&self, machine: &str) -> Result<usize> {
        self.machines
            .iter()
            .position(|m| m.id == machine)
            .ok_or_else(|| ProtoError::UnknownMachine(machine.into()))
    }

    fn push(&mut self, endpoint: usize, tick: Tick, action: Action) {
        if tick > self.cfg.horizon {
            return;
        }
        self.seq += 1;
        self.queue.push(Reverse(Event {
            tick,
            endpoint,
            rank: action.rank(),
            seq: self.seq,
            epoch: self.machines[endpoint].epoch,
            action,
        }));
    }

    fn delay(&mut self, base: Tick) -> Tick {
        let j = self.cfg.timing.jitter;
        base + if j > 0 { self.rng.random_range(0..=j) } else { 0 }
    }

    fn after(&mut self, endpoint: usize, base: Tick, action: Action) {
        let at = self.now + self.delay(base);
        self.push(endpoint, at, action);
    }

    fn carrier(&self, id: &str) -> CarrierDescriptor {
        self.enodeb.known_carriers[id].clone()
    }

    fn emit(&mut self, kind: MessageKind, endpoint: usize, uplink: bool, carrier: &str, payload: Payload) {
        let machine = self.machines[endpoint].id.clone();
        let (from, to) = if uplink {
            (machine, self.enb.clone())
        } else {
            (self.enb.clone(), machine)
        };
        self.trace.push(Message {
            time: self.now,
            kind,
            from,
            to,
            carrier: carrier.into(),
            payload,
        });
    }

    fn set_phase(&mut self, endpoint: usize, phase: Phase) {
        let now = self.now;
        let m = &mut self.machines[endpoint];
        let was_on = !matches!(m.state.phase, Phase::Off | Phase::DrxSleep);
        let is_on = !matches!(phase, Phase::Off | Phase::DrxSleep);
        if was_on && !is_on {
            if let Some(s) = m.on_since.take() {
                m.on_time += now - s;
            }
        } else if !was_on && is_on {
            m.on_since = Some(now);
        }
        m.state.phase = phase;
    }

    fn cancel_pending(&mut self, endpoint: usize) {
        let m = &mut self.machines[endpoint];
        m.epoch += 1;
        m.state.pending_report = None;
    }

    /// Process the next live event. Returns false once the queue is empty.
    pub fn step(&mut self) -> bool {
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.epoch != self.machines[ev.endpoint].epoch {
                continue;
            }
            self.now = self.now.max(ev.tick);
            self.fire(ev.endpoint, ev.action);
            return true;
        }
        false
    }

    /// Process every event at or before `tick` and advance the clock to it.
    pub fn run_until(&mut self, tick: Tick) {
        while self.queue.peek().is_some_and(|Reverse(e)| e.tick <= tick) {
            self.step();
        }
        self.now = self.now.max(tick);
    }

    /// Run to the horizon.
    pub fn run(&mut self) {
        while self.step() {}
        self.now = self.now.max(self.cfg.horizon);
    }

    fn fire(&mut self, i: usize, action: Action) {
        let t = self.cfg.timing.clone();
        let anchor = self.anchor.clone();
        match action {
            Action::PowerOn => {
                self.machines[i].powered_at = Some(self.now);
                self.set_phase(i, Phase::Calibrating);
                self.after(i, t.calibration, Action::CalibrationDone);
            }
            Action::CalibrationDone => {
                self.set_phase(i, Phase::Scanning);
                self.trace.push(Message {
                    time: self.now,
                    kind: MessageKind::Scanning,
                    from: self.machines[i].id.clone(),
                    to: "*".into(),
                    carrier: anchor.clone(),
                    payload: Payload::None,
                });
                self.after(i, t.scan, Action::Synced(anchor));
            }
            Action::Synced(c) => {
                let desc = self.carrier(&c);
                self.emit(MessageKind::SyncAcquired, i, false, &c, Payload::None);
                self.machines[i].state.current_carrier = Some(desc.clone());
                if desc.is_unlicensed() {
                    self.set_phase(i, Phase::SyncedUnlicensed);
                    self.after(i, t.random_access, Action::RandomAccess(c));
                } else if self.machines[i].group_reported {
                    self.set_phase(i, Phase::SyncedLicensed);
                    self.after(i, t.random_access, Action::RandomAccess(c));
                } else {
                    self.set_phase(i, Phase::SyncedLicensed);
                    self.after(i, t.mib, Action::Mib);
                }
            }
            Action::Mib => {
                let cell_id = self.cfg.cell_id;
                self.emit(MessageKind::MibDecoded, i, false, &anchor, Payload::Cell { cell_id });
                self.after(i, t.random_access, Action::RandomAccess(anchor));
            }
            Action::RandomAccess(c) => {
                let unlicensed = self.carrier(&c).is_unlicensed();
                self.set_phase(
                    i,
                    if unlicensed {
                        Phase::RandomAccessUnlicensed
                    } else {
                        Phase::RandomAccessLicensed
                    },
                );
                self.emit(MessageKind::RandomAccessRequest, i, true, &c, Payload::None);
                if self.machines[i].group_reported {
                    self.after(i, t.grant, Action::Grant(c));
                } else {
                    self.after(i, t.group_request, Action::GroupRequest);
                }
            }
            Action::GroupRequest => {
                self.set_phase(i, Phase::ReportingGroupId);
                self.emit(MessageKind::GroupIdRequest, i, false, &anchor, Payload::None);
                self.after(i, t.group_report, Action::GroupReport);
            }
            Action::GroupReport => {
                let group = self.machines[i].group;
                self.emit(MessageKind::GroupIdReport, i, true, &anchor, Payload::Group(group));
                self.machines[i].group_reported = true;
                let id = self.machines[i].id.clone();
                let chosen = self
                    .enodeb
                    .select_carrier(group.tolerance_class)
                    .map(|c| c.carrier_id.clone());
                match chosen {
                    Some(c) => {
                        self.enodeb
                            .announce(&c, self.now)
                            .expect("selected carrier is a known unlicensed carrier");
                        self.enodeb.allocate(&id, &c, self.now);
                        self.after(i, t.switch, Action::SwitchCommand(c));
                    }
                    None => {
                        self.enodeb.allocate(&id, &anchor, self.now);
                        self.after(i, t.grant, Action::Grant(anchor));
                    }
                }
            }
            Action::SwitchCommand(c) => {
                let desc = self.carrier(&c);
                self.set_phase(i, Phase::Switching);
                self.emit(MessageKind::CarrierSwitchCommand, i, false, &anchor, Payload::Carrier(desc));
                self.after(i, t.sync, Action::Synced(c));
            }
            Action::Grant(c) => {
                self.set_phase(i, Phase::Connected);
                self.emit(MessageKind::DataGrant, i, false, &c, Payload::None);
                if self.carrier(&c).is_unlicensed() {
                    self.after(i, t.data, Action::Data(c));
                }
            }
            Action::Data(c) => {
                let bytes = self.cfg.data_bytes;
                self.emit(MessageKind::DataExchange, i, true, &c, Payload::Data { bytes });
                if let Some(drx) = self.cfg.drx {
                    let at = self.now + drx.on_duration;
                    self.push(i, at, Action::Sleep);
                }
            }
            Action::Sleep => {
                self.set_phase(i, Phase::DrxSleep);
                if let Some(drx) = self.cfg.drx {
                    let at = self.now + drx.sleep_len();
                    self.push(i, at, Action::Wake);
                }
            }
            Action::Wake => {
                self.set_phase(i, Phase::Connected);
                if let Some(target) = self.machines[i].pending_change.take() {
                    self.change_machine(i, &target);
                } else if let Some(drx) = self.cfg.drx {
                    let at = self.now + drx.wakeup_margin + drx.on_duration;
                    self.push(i, at, Action::Sleep);
                }
            }
            Action::GapEnd(target) => {
                let report = self.machines[i]
                    .state
                    .pending_report
                    .take()
                    .expect("gap end without a pending report");
                let current = self.current_carrier_id(i);
                self.emit(MessageKind::MeasurementReport, i, true, &current, Payload::Report(report.clone()));
                debug_assert_eq!(report.target, target);
                self.enodeb.sensing_reports.push(report);
                self.set_phase(i, Phase::Connected);
                if self.carrier(&current).is_unlicensed() {
                    self.after(i, t.data, Action::Data(current));
                }
            }
        }
    }

    fn current_carrier_id(&self, i: usize) -> String {
        self.machines[i]
            .state
            .current_carrier
            .as_ref()
            .map_or_else(|| self.anchor.clone(), |c| c.carrier_id.clone())
    }

    fn change_machine(&mut self, i: usize, target: &str) {
        self.cancel_pending(i);
        let old = self.current_carrier_id(i);
        let desc = self.carrier(target);
        let id = self.machines[i].id.clone();
        self.enodeb.allocate(&id, target, self.now);
        self.set_phase(i, Phase::Switching);
        self.emit(MessageKind::CarrierChangeCommand, i, false, &old, Payload::Carrier(desc));
        let sync = self.cfg.timing.sync;
        self.after(i, sync, Action::Synced(target.into()));
    }

    /// Announce an unlicensed carrier to the neighboring S-eNodeBs.
    pub fn announce(&mut self, carrier: &str) -> Result<()> {
        self.enodeb.announce(carrier, self.now)
    }

    /// Runs the simulation up to `at`, then suspends the machine's data and
    /// measures `target` for the configured gap length.
    ///
    /// Returns the gap command and the report that is delivered at
    /// `at + gap_len` unless a carrier change cancels the gap first.
    pub fn schedule_measurement_gap(&mut self, machine: &str, target: &str, at: Tick) -> Result<(Message, Message)> {
        let i = self.index(machine)?;
        if !self.enodeb.known_carriers.contains_key(target) {
            return Err(ProtoError::UnknownCarrier(target.into()));
        }
        if at < self.now {
            return Err(ProtoError::InPast { at, now: self.now });
        }
        self.run_until(at);
        let phase = self.machines[i].state.phase;
        if phase != Phase::Connected {
            return Err(ProtoError::NotConnected {
                machine: machine.into(),
                phase,
                at,
            });
        }
        self.cancel_pending(i);
        self.set_phase(i, Phase::MeasurementGap);
        let current = self.current_carrier_id(i);
        let duration = self.cfg.gap_len;
        self.emit(
            MessageKind::MeasurementGapCommand,
            i,
            false,
            &current,
            Payload::Gap {
                target: target.into(),
                duration,
            },
        );
        let command = self.trace.last().cloned().expect("just emitted");
        let report = MeasurementReport {
            machine: machine.into(),
            target: target.into(),
            power_dbm: self.measure_power(i, target, at),
            at: at + duration,
        };
        self.machines[i].state.pending_report = Some(report.clone());
        self.push(i, at + duration, Action::GapEnd(target.into()));
        let report_msg = Message {
            time: at + duration,
            kind: MessageKind::MeasurementReport,
            from: machine.into(),
            to: self.enb.clone(),
            carrier: current,
            payload: Payload::Report(report),
        };
        Ok((command, report_msg))
    }

    fn measure_power(&self, i: usize, target: &str, at: Tick) -> f64 {
        let seed = derive_seed(self.seed, &[tag("gap"), i as u64, at, tag(target)]);
        let kind = match self.cfg.carrier[target].occupancy_snr_db {
            Some(_) => NarrowbandKind::Cyclo,
            None => NarrowbandKind::NoiseOnly,
        };
        let snr = self.cfg.carrier[target].occupancy_snr_db.unwrap_or(0.0);
        let block = synth_narrowband(kind, 32, snr, self.cfg.gap_samples, seed)
            .expect("gap_samples validated as a multiple of 32");
        self.cfg.noise_floor_dbm + linear_to_db(block.mean_power() / NOISE_POWER)
    }

    /// Move every machine allocated to `old` onto `new`.
    ///
    /// Pending measurement gaps of affected machines are canceled first.
    /// Sleeping machines receive the command when they next wake. Returns the
    /// trace from the first command up to the last affected machine's new
    /// data grant.
    pub fn trigger_carrier_change(&mut self, old: &str, new: &str) -> Result<Vec<Message>> {
        for c in [old, new] {
            if !self.enodeb.known_carriers.contains_key(c) {
                return Err(ProtoError::UnknownCarrier(c.into()));
            }
        }
        if old == new {
            return Ok(Vec::new());
        }
        if !self.enodeb.neighbor_announcements.contains(new) {
            return Err(ProtoError::Unannounced(new.into()));
        }
        let start = self.trace.len();
        let affected: Vec<usize> = (0..self.machines.len())
            .filter(|&i| self.enodeb.allocations.get(&self.machines[i].id).map(String::as_str) == Some(old))
            .collect();
        for &i in &affected {
            if self.machines[i].state.phase == Phase::DrxSleep {
                let id = self.machines[i].id.clone();
                self.enodeb.allocate(&id, new, self.now);
                self.machines[i].pending_change = Some(new.into());
            } else {
                self.change_machine(i, new);
            }
        }
        let mut waiting: BTreeSet<String> = affected.iter().map(|&i| self.machines[i].id.clone()).collect();
        let mut seen = start;
        while !waiting.is_empty() && self.step() {
            for m in &self.trace[seen..] {
                if m.kind == MessageKind::DataGrant && m.carrier == new {
                    waiting.remove(&m.to);
                }
            }
            seen = self.trace.len();
        }
        Ok(self.trace[start..].to_vec())
    }
}

/// Result of a scripted scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub trace: Vec<Message>,
    pub enodeb: SeNodeBState,
    /// Scripted operations that were refused, in script order.
    pub rejections: Vec<String>,
    pub ledgers: BTreeMap<String, PowerLedger>,
}

enum Scripted<'a> {
    Announce(&'a str, &'a AnnounceSpec),
    Change(&'a str, &'a ChangeSpec),
    Gap(&'a str, &'a GapSpec),
}

/// Run a scenario with its scripted announcements, gaps and carrier changes.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64, powers: &PowerConstants) -> Result<ScenarioOutcome> {
    let mut sim = Simulation::new(cfg, seed)?;
    let mut script: Vec<(Tick, u8, Scripted)> = Vec::new();
    script.extend(cfg.announce.iter().map(|(n, a)| (a.at, 0, Scripted::Announce(n, a))));
    script.extend(cfg.change.iter().map(|(n, c)| (c.at, 1, Scripted::Change(n, c))));
    script.extend(cfg.gap.iter().map(|(n, g)| (g.at, 2, Scripted::Gap(n, g))));
    script.sort_by_key(|(at, order, _)| (*at, *order));

    let mut rejections = Vec::new();
    for (at, _, op) in script {
        if at < sim.now() {
            rejections.push(format!("{}: scheduled at {at} but clock is at {}", name_of(&op), sim.now()));
            continue;
        }
        let outcome = match op {
            Scripted::Announce(_, a) => {
                sim.run_until(at);
                sim.announce(&a.carrier)
            }
            Scripted::Change(_, c) => {
                sim.run_until(at);
                sim.trigger_carrier_change(&c.from, &c.to).map(|_| ())
            }
            Scripted::Gap(_, g) => sim.schedule_measurement_gap(&g.machine, &g.target, at).map(|_| ()),
        };
        if let Err(e) = outcome {
            rejections.push(format!("{}: {e}", name_of(&op)));
        }
    }
    sim.run();
    let ledgers = sim
        .machine_ids()
        .into_iter()
        .map(|id| {
            let l = sim.power_ledger(&id, powers).expect("known machine");
            (id, l)
        })
        .collect();
    Ok(ScenarioOutcome {
        trace: sim.trace().to_vec(),
        enodeb: sim.enodeb().clone(),
        rejections,
        ledgers,
    })
}

fn name_of(op: &Scripted) -> String {
    match op {
        Scripted::Announce(n, _) => format!("announce {n}"),
        Scripted::Change(n, _) => format!("change {n}"),
        Scripted::Gap(n, _) => format!("gap {n}"),
    }
}

/// Handshake of a single machine against an S-eNodeB configuration.
pub fn run_handshake(machine: &MachineSpec, enodeb: &ScenarioConfig, seed: u64) -> Result<Vec<Message>> {
    let mut cfg = enodeb.clone();
    cfg.machine = BTreeMap::from([("M1".to_string(), machine.clone())]);
    cfg.gap.clear();
    cfg.change.clear();
    cfg.drx = None;
    let mut sim = Simulation::new(&cfg, seed)?;
    sim.run();
    Ok(sim.trace().to_vec())
}

/// Violations of the protocol safety rules in a trace and audit log.
pub fn safety_violations(trace: &[Message], enodeb: &SeNodeBState) -> Vec<String> {
    let mut out = Vec::new();
    for w in trace.windows(2) {
        if w[1].time < w[0].time {
            out.push(format!("time goes backwards at {}", w[1].to_line()));
        }
    }

    #[derive(Default)]
    struct Seen {
        synced: BTreeSet<String>,
        granted: BTreeSet<String>,
        group_reported: bool,
    }
    let mut per: BTreeMap<String, Seen> = BTreeMap::new();
    for m in trace {
        let s = per.entry(m.machine().to_string()).or_default();
        match m.kind {
            MessageKind::CarrierSwitchCommand | MessageKind::CarrierChangeCommand => {
                if m.kind == MessageKind::CarrierSwitchCommand && !s.group_reported {
                    out.push(format!("switch before group report: {}", m.to_line()));
                }
                s.synced.clear();
                s.granted.clear();
            }
            MessageKind::GroupIdReport => s.group_reported = true,
            MessageKind::SyncAcquired => {
                s.synced.insert(m.carrier.clone());
            }
            MessageKind::DataGrant => {
                s.granted.insert(m.carrier.clone());
            }
            MessageKind::DataExchange => {
                let unlicensed = enodeb.known_carriers.get(&m.carrier).is_some_and(|c| c.is_unlicensed());
                if unlicensed && !(s.synced.contains(&m.carrier) && s.granted.contains(&m.carrier)) {
                    out.push(format!("data before sync and grant: {}", m.to_line()));
                }
            }
            _ => {}
        }
    }

    let mut announced = BTreeSet::new();
    for a in &enodeb.audit {
        match a {
            AuditEntry::Announced { carrier, .. } => {
                announced.insert(carrier.clone());
            }
            AuditEntry::Allocated { machine, carrier, at } => {
                let unlicensed = enodeb.known_carriers.get(carrier).is_some_and(|c| c.is_unlicensed());
                if unlicensed && !announced.contains(carrier) {
                    out.push(format!("{machine} allocated unannounced {carrier} at {at}"));
                }
            }
        }
    }
    for (machine, carrier) in &enodeb.allocations {
        if !enodeb.known_carriers.contains_key(carrier) {
            out.push(format!("{machine} allocated unknown {carrier}"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds(trace: &[Message]) -> Vec<(MessageKind, String)> {
        trace.iter().map(|m| (m.kind, m.carrier.clone())).collect()
    }

    fn unlicensed(class: u32) -> CarrierSpec {
        CarrierSpec {
            band: Band::Unlicensed,
            modulation: Modulation::Qam16,
            coding: Coding::Rate1_2,
            relative_timing: Some(1),
            serves_class: class,
            occupancy_snr_db: None,
        }
    }

    fn machine(group: u32, class: u32) -> MachineSpec {
        MachineSpec {
            group,
            class,
            powered_on: true,
            start: 0,
        }
    }

    fn connected_sim(cfg: &ScenarioConfig) -> Simulation {
        let mut sim = Simulation::new(cfg, 0).unwrap();
        sim.run_until(500);
        sim
    }

    #[test]
    fn golden_handshake_order() {
        let trace = run_handshake(&machine(1, 1), &ScenarioConfig::default(), 0).unwrap();
        use MessageKind::*;
        let expected = [
            (Scanning, "L1"),
            (SyncAcquired, "L1"),
            (MibDecoded, "L1"),
            (RandomAccessRequest, "L1"),
            (GroupIdRequest, "L1"),
            (GroupIdReport, "L1"),
            (CarrierSwitchCommand, "L1"),
            (SyncAcquired, "U1"),
            (RandomAccessRequest, "U1"),
            (DataGrant, "U1"),
            (DataExchange, "U1"),
        ];
        let got = kinds(&trace);
        assert_eq!(got.len(), 11);
        for (g, e) in got.iter().zip(expected) {
            assert_eq!((g.0, g.1.as_str()), e);
        }
        assert_eq!(
            format_trace(&trace),
            format_trace(&run_handshake(&machine(1, 1), &ScenarioConfig::default(), 0).unwrap())
        );
    }

    #[test]
    fn powered_off_machine_is_silent() {
        let mut m = machine(1, 1);
        m.powered_on = false;
        assert!(run_handshake(&m, &ScenarioConfig::default(), 0).unwrap().is_empty());
    }

    #[test]
    fn fallback_stays_licensed() {
        let mut cfg = ScenarioConfig::default();
        cfg.carrier.remove("U1");
        let trace = run_handshake(&machine(1, 1), &cfg, 3).unwrap();
        let last = trace.last().unwrap();
        assert_eq!(last.kind, MessageKind::DataGrant);
        assert_eq!(last.carrier, "L1");
        assert!(trace.iter().all(|m| m.carrier == "L1"));

        cfg.carrier.clear();
        assert_eq!(run_handshake(&machine(1, 1), &cfg, 3), Err(ProtoError::NoLicensedCarrier));
    }

    #[test]
    fn machines_get_carriers_matching_their_class() {
        let mut cfg = ScenarioConfig::default();
        cfg.carrier.insert("U1".into(), unlicensed(1));
        cfg.carrier.insert("U2".into(), unlicensed(2));
        cfg.machine = BTreeMap::from([("M1".into(), machine(1, 1)), ("M2".into(), machine(2, 2))]);
        let mut sim = Simulation::new(&cfg, 7).unwrap();
        sim.run();
        assert_eq!(sim.enodeb().allocations["M1"], "U1");
        assert_eq!(sim.enodeb().allocations["M2"], "U2");
        assert!(sim.enodeb().neighbor_announcements.contains("U1"));
        assert!(safety_violations(sim.trace(), sim.enodeb()).is_empty());
    }

    #[test]
    fn carrier_selection_prefers_highest_fitting_class() {
        let mut cfg = ScenarioConfig::default();
        cfg.carrier.insert("U0".into(), unlicensed(3));
        cfg.carrier.insert("U2".into(), unlicensed(1));
        cfg.carrier.insert("U3".into(), unlicensed(5));
        let sim = Simulation::new(&cfg, 0).unwrap();
        assert_eq!(sim.enodeb.select_carrier(4).unwrap().carrier_id, "U0");
        assert_eq!(sim.enodeb.select_carrier(1).unwrap().carrier_id, "U1");
        assert!(sim.enodeb.select_carrier(0).is_none());
    }

    #[test]
    fn measurement_gap_on_vacant_and_occupied_carriers() {
        let mut cfg = ScenarioConfig::default();
        cfg.carrier.insert("U2".into(), unlicensed(0));
        let mut busy = unlicensed(0);
        busy.occupancy_snr_db = Some(10.0);
        cfg.carrier.insert("U3".into(), busy);

        let mut sim = connected_sim(&cfg);
        let (cmd, rep) = sim.schedule_measurement_gap("M1", "U2", 500).unwrap();
        assert_eq!(cmd.kind, MessageKind::MeasurementGapCommand);
        assert_eq!(rep.time, 500 + cfg.gap_len);
        let Payload::Report(r) = &rep.payload else { panic!() };
        assert!((r.power_dbm - cfg.noise_floor_dbm).abs() < 0.5, "{}", r.power_dbm);
        assert_eq!(sim.machine_state("M1").unwrap().phase, Phase::MeasurementGap);

        sim.run_until(600);
        assert_eq!(sim.machine_state("M1").unwrap().phase, Phase::Connected);
        assert_eq!(sim.enodeb().sensing_reports.len(), 1);
        let (_, rep) = sim.schedule_measurement_gap("M1", "U3", 600).unwrap();
        let Payload::Report(r) = &rep.payload else { panic!() };
        assert!((r.power_dbm - (cfg.noise_floor_dbm + 10.0)).abs() <= 1.0, "{}", r.power_dbm);

        // data resumes after the report
        sim.run_until(700);
        let after: Vec<_> = sim.trace().iter().filter(|m| m.time > 606).map(|m| m.kind).collect();
        assert!(after.contains(&MessageKind::DataExchange));
        assert!(safety_violations(sim.trace(), sim.enodeb()).is_empty());
    }

    #[test]
    fn measurement_gap_needs_connected_machine() {
        let mut cfg = ScenarioConfig::default();
        cfg.drx = Some(DrxConfig {
            cycle_period: 1_000,
            on_duration: 10,
            wakeup_margin: 5,
            extended: false,
        });
        let mut sim = Simulation::new(&cfg, 0).unwrap();
        sim.run_until(300);
        assert_eq!(sim.machine_state("M1").unwrap().phase, Phase::DrxSleep);
        let before = sim.trace().len();
        assert!(matches!(
            sim.schedule_measurement_gap("M1", "U1", 300),
            Err(ProtoError::NotConnected { phase: Phase::DrxSleep, .. })
        ));
        assert_eq!(sim.trace().len(), before);

        let mut early = Simulation::new(&ScenarioConfig::default(), 0).unwrap();
        assert!(matches!(
            early.schedule_measurement_gap("M1", "U1", 10),
            Err(ProtoError::NotConnected { .. })
        ));
        assert!(matches!(
            early.schedule_measurement_gap("M9", "U1", 10),
            Err(ProtoError::UnknownMachine(_))
        ));
    }

    fn three_on_a() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.carrier = BTreeMap::from([
            (
                "L1".into(),
                CarrierSpec {
                    band: Band::Licensed,
                    modulation: Modulation::Qpsk,
                    coding: Coding::Rate1_3,
                    relative_timing: None,
                    serves_class: 0,
                    occupancy_snr_db: None,
                },
            ),
            ("UA".into(), unlicensed(1)),
            ("UB".into(), unlicensed(0)),
        ]);
        cfg.machine = (1..=3).map(|i| (format!("M{i}"), machine(i, 1))).collect();
        cfg
    }

    #[test]
    fn carrier_change_moves_every_machine() {
        let mut sim = connected_sim(&three_on_a());
        assert!(sim.enodeb().allocations.values().all(|c| c == "UA"));
        assert_eq!(sim.trigger_carrier_change("UA", "UB"), Err(ProtoError::Unannounced("UB".into())));
        assert!(sim.enodeb().allocations.values().all(|c| c == "UA"));

        sim.announce("UB").unwrap();
        let frag = sim.trigger_carrier_change("UA", "UB").unwrap();
        assert_eq!(frag.iter().filter(|m| m.kind == MessageKind::CarrierChangeCommand).count(), 3);
        for id in ["M1", "M2", "M3"] {
            assert_eq!(sim.enodeb().allocations[id], "UB");
            let mine: Vec<_> = frag.iter().filter(|m| m.machine() == id).collect();
            let cmd = mine.iter().position(|m| m.kind == MessageKind::CarrierChangeCommand).unwrap();
            let sync = mine
                .iter()
                .position(|m| m.kind == MessageKind::SyncAcquired && m.carrier == "UB")
                .unwrap();
            assert!(cmd < sync);
            assert!(mine[cmd..sync].iter().all(|m| m.kind != MessageKind::DataExchange));
            let Payload::Carrier(d) = &mine[cmd].payload else { panic!() };
            assert_eq!(d.carrier_id, "UB");
            assert_eq!(d.relative_timing, Some(1));
        }
        assert_eq!(frag.last().unwrap().kind, MessageKind::DataGrant);
        sim.run();
        for id in ["M1", "M2", "M3"] {
            let st = sim.machine_state(id).unwrap();
            assert_eq!(st.phase, Phase::Connected);
            assert_eq!(st.current_carrier.as_ref().unwrap().carrier_id, "UB");
        }
        assert!(safety_violations(sim.trace(), sim.enodeb()).is_empty());
    }

    #[test]
    fn carrier_change_to_same_carrier_is_noop() {
        let mut sim = connected_sim(&three_on_a());
        let before = sim.trace().len();
        assert!(sim.trigger_carrier_change("UA", "UA").unwrap().is_empty());
        assert_eq!(sim.trace().len(), before);
        assert!(matches!(
            sim.trigger_carrier_change("UA", "UX"),
            Err(ProtoError::UnknownCarrier(_))
        ));
        assert_eq!(sim.announce("L1"), Err(ProtoError::LicensedAnnouncement("L1".into())));
    }

    #[test]
    fn carrier_change_cancels_pending_gap() {
        let mut sim = connected_sim(&three_on_a());
        sim.announce("UB").unwrap();
        sim.schedule_measurement_gap("M2", "UB", 500).unwrap();
        let frag = sim.trigger_carrier_change("UA", "UB").unwrap();
        sim.run();
        assert!(sim.trace().iter().all(|m| m.kind != MessageKind::MeasurementReport));
        assert!(sim.machine_state("M2").unwrap().pending_report.is_none());
        assert!(frag.iter().any(|m| m.kind == MessageKind::CarrierChangeCommand && m.to == "M2"));
        assert!(sim.enodeb().sensing_reports.is_empty());
    }

    #[test]
    fn sleeping_machine_changes_on_wake() {
        let mut cfg = three_on_a();
        cfg.machine = BTreeMap::from([("M1".into(), machine(1, 1))]);
        cfg.drx = Some(DrxConfig {
            cycle_period: 1_000,
            on_duration: 10,
            wakeup_margin: 5,
            extended: false,
        });
        let mut sim = Simulation::new(&cfg, 0).unwrap();
        sim.run_until(300);
        assert_eq!(sim.machine_state("M1").unwrap().phase, Phase::DrxSleep);
        sim.announce("UB").unwrap();
        let frag = sim.trigger_carrier_change("UA", "UB").unwrap();
        assert!(frag[0].time > 300);
        assert_eq!(frag[0].kind, MessageKind::CarrierChangeCommand);
        assert_eq!(frag.last().unwrap().kind, MessageKind::DataGrant);
    }

    #[test]
    fn drx_duty_cycle_is_tracked() {
        let mut cfg = ScenarioConfig::default();
        cfg.timing.jitter = 0;
        cfg.drx = Some(DrxConfig {
            cycle_period: 1_000,
            on_duration: 40,
            wakeup_margin: 10,
            extended: false,
        });
        cfg.horizon = 200_000;
        let mut sim = Simulation::new(&cfg, 0).unwrap();
        sim.run();
        let ledger = sim.power_ledger("M1", &PowerConstants::default()).unwrap();
        assert!(ledger.radio_on_time <= ledger.total_time);
        assert!((ledger.duty_cycle() - 0.05).abs() < 0.005, "{}", ledger.duty_cycle());
        assert!(ledger.lifetime().unwrap().days() > 100.0);
    }

    #[test]
    fn drx_validation() {
        let ok = DrxConfig {
            cycle_period: 2_560,
            on_duration: 10,
            wakeup_margin: 5,
            extended: false,
        };
        assert!(ok.validate().is_ok());
        assert!(DrxConfig { cycle_period: 5_120, ..ok }.validate().is_err());
        assert!(DrxConfig {
            cycle_period: 5_120,
            extended: true,
            ..ok
        }
        .validate()
        .is_ok());
        assert!(DrxConfig { on_duration: 2_556, ..ok }.validate().is_err());
        assert!(DrxConfig { cycle_period: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn lifetime_anchors() {
        let p = PowerConstants::default();
        let d1 = lifetime_at_duty(1.0, &p).unwrap().days();
        let d25 = lifetime_at_duty(0.25, &p).unwrap().days();
        let d01 = lifetime_at_duty(0.01, &p).unwrap().days();
        assert!((d1 - 7.0).abs() < 1e-9);
        // independent closed form: battery / (duty * active + (1 - duty) * sleep) / 24
        let expect = |duty: f64| 3_000.0 / (duty * 3_000.0 / 168.0 + (1.0 - duty) * 0.015) / 24.0;
        assert!((d25 - expect(0.25)).abs() < 1e-6);
        assert!((25.0..=35.0).contains(&d25), "{d25}");
        assert!(d01 >= 365.0, "{d01}");

        let drx = DrxConfig {
            cycle_period: 2_560,
            on_duration: 600,
            wakeup_margin: 40,
            extended: false,
        };
        assert_eq!(drx.duty_cycle(), 0.25);
        assert!((drx_lifetime(&drx, &p).unwrap().days() - d25).abs() < 1e-9);
    }

    #[test]
    fn lifetime_edge_cases() {
        let zero = PowerConstants {
            battery_capacity_mwh: 10.0,
            active_power_mw: 0.0,
            sleep_power_mw: 0.0,
        };
        assert_eq!(lifetime_at_duty(0.5, &zero).unwrap(), Lifetime::Unbounded);
        let inverted = PowerConstants {
            active_power_mw: 1.0,
            sleep_power_mw: 2.0,
            ..zero
        };
        assert!(lifetime_at_duty(0.5, &inverted).is_err());
        let no_battery = PowerConstants {
            battery_capacity_mwh: 0.0,
            ..PowerConstants::default()
        };
        assert!(lifetime_at_duty(0.5, &no_battery).is_err());
        assert!(lifetime_at_duty(1.5, &PowerConstants::default()).is_err());
        let free_sleep = PowerConstants {
            sleep_power_mw: 0.0,
            ..PowerConstants::default()
        };
        assert_eq!(lifetime_at_duty(0.0, &free_sleep).unwrap(), Lifetime::Unbounded);
    }

    #[test]
    fn carrier_descriptor_validation() {
        let mut cfg = ScenarioConfig::default();
        cfg.carrier.get_mut("L1").unwrap().relative_timing = Some(3);
        assert!(matches!(Simulation::new(&cfg, 0), Err(ProtoError::BadCarrier { .. })));
        let mut cfg = ScenarioConfig::default();
        cfg.gap.insert(
            "g".into(),
            GapSpec {
                machine: "M1".into(),
                target: "U9".into(),
                at: 1,
            },
        );
        assert!(matches!(Simulation::new(&cfg, 0), Err(ProtoError::UnknownCarrier(_))));
    }

    #[test]
    fn scripted_scenario() {
        let mut cfg = three_on_a();
        cfg.announce.insert("a1".into(), AnnounceSpec { carrier: "UB".into(), at: 200 });
        cfg.change.insert(
            "c1".into(),
            ChangeSpec {
                from: "UA".into(),
                to: "UB".into(),
                at: 400,
            },
        );
        cfg.gap.insert(
            "g1".into(),
            GapSpec {
                machine: "M1".into(),
                target: "UB".into(),
                at: 300,
            },
        );
        cfg.gap.insert(
            "g2".into(),
            GapSpec {
                machine: "M1".into(),
                target: "UB".into(),
                at: 1,
            },
        );
        let out = run_scenario(&cfg, 5, &PowerConstants::default()).unwrap();
        assert_eq!(out.rejections.len(), 1);
        assert!(out.rejections[0].starts_with("gap g2"));
        assert_eq!(out.enodeb.sensing_reports.len(), 1);
        assert!(out.enodeb.allocations.values().all(|c| c == "UB"));
        assert!(safety_violations(&out.trace, &out.enodeb).is_empty());
        assert_eq!(out.ledgers.len(), 3);
    }

    #[test]
    fn trace_formats() {
        let trace = run_handshake(&machine(1, 1), &ScenarioConfig::default(), 0).unwrap();
        let text = format_trace(&trace);
        assert_eq!(text.lines().count(), 11);
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("0 scanning M1 * carrier=L1") || first.contains(" scanning M1 * carrier=L1"));
        let switch = text.lines().nth(6).unwrap();
        assert!(switch.contains("carrier_switch_command enb:S1 M1 carrier=L1 target=U1 band=unlicensed"));
        let tsv = format_trace_tsv(&trace);
        assert_eq!(tsv.lines().count(), 12);
        assert_eq!(tsv.lines().nth(1).unwrap().split('\t').count(), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn traces_are_deterministic_and_safe(seed in any::<u64>(), machines in 1usize..4, classes in proptest::collection::vec(0u32..3, 3)) {
            let mut cfg = three_on_a();
            cfg.machine = (0..machines).map(|i| (format!("M{i}"), machine(i as u32, classes[i]))).collect();
            let a = run_scenario(&cfg, seed, &PowerConstants::default()).unwrap();
            let b = run_scenario(&cfg, seed, &PowerConstants::default()).unwrap();
            prop_assert_eq!(format_trace(&a.trace), format_trace(&b.trace));
            prop_assert!(safety_violations(&a.trace, &a.enodeb).is_empty());
        }

        #[test]
        fn lifetime_decreases_with_duty(d in 0.0f64..0.99, step in 1e-6f64..0.01) {
            let p = PowerConstants::default();
            prop_assert!(lifetime_at_duty(d + step, &p).unwrap().days() < lifetime_at_duty(d, &p).unwrap().days());
        }
    }
}
