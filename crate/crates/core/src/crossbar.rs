//! Crossbar arrays of synapses: analog matrix-vector multiply, ADC
//! quantization, tiling of large matrices and the batch timing model.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::synapse::{
    ReferenceLadder, SimTime, SynapseState, TransferEvent, TransferOutcome, TransferPolicy,
};

/// Drain-source read voltage at which composite currents are specified.
pub const V_READ: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossbarConfig {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub read_delay_ns: f64,
    /// Columns multiplexed onto one ADC.
    pub adc_share: usize,
    pub adc_bits: u32,
    /// Quantize column outputs during training and evaluation.
    pub adc_enabled: bool,
    pub v_read: f64,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        CrossbarConfig {
            tile_rows: 128,
            tile_cols: 128,
            read_delay_ns: 2.0,
            adc_share: 8,
            adc_bits: 8,
            adc_enabled: false,
            v_read: V_READ,
        }
    }
}

impl CrossbarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return Err(Error::config("tile dimensions must be positive"));
        }
        if self.read_delay_ns.is_nan() || self.read_delay_ns <= 0.0 {
            return Err(Error::config("read_delay_ns must be positive"));
        }
        if self.adc_share == 0 {
            return Err(Error::config("adc_share must be at least 1"));
        }
        if self.adc_bits == 0 || self.adc_bits > 24 {
            return Err(Error::config("adc_bits must lie in 1..=24"));
        }
        if !(self.v_read > 0.0 && self.v_read.is_finite()) {
            return Err(Error::config("v_read must be positive"));
        }
        Ok(())
    }
}

/// Quantizes a column current to an ADC code, rounding half up and
/// saturating at full scale.
pub fn adc_quantize(current: f64, full_scale: f64, bits: u32) -> u32 {
    let top = (1u64 << bits) - 1;
    let code = (current / full_scale * top as f64 + 0.5).floor();
    code.clamp(0.0, top as f64) as u32
}

/// Per-batch latency model for one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingModel {
    pub t_batch_ns: u64,
    pub batch_size: usize,
}

impl Default for TimingModel {
    fn default() -> Self {
        TimingModel {
            t_batch_ns: 700,
            batch_size: 100,
        }
    }
}

impl TimingModel {
    /// Larger-network configuration, three times slower per batch.
    pub fn vgg_scale() -> Self {
        TimingModel {
            t_batch_ns: 3 * 700,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_batch_ns == 0 {
            return Err(Error::config("t_batch_ns must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Longest transfer interval, in batches, before the LSB leaks one state.
pub fn max_transfer_interval(timing: &TimingModel, params: &DeviceParams) -> u64 {
    params.decay_time_per_lsb_ns / timing.t_batch_ns
}

/// One physical array of synapses.
#[derive(Debug, Clone)]
pub struct CrossbarArray {
    rows: usize,
    cols: usize,
    cells: Vec<SynapseState>,
    /// `read_current / v_read`, kept in sync with `cells`.
    conductance: Vec<f64>,
    params: DeviceParams,
    refs: ReferenceLadder,
    config: CrossbarConfig,
}

impl CrossbarArray {
    pub fn new(
        rows: usize,
        cols: usize,
        params: DeviceParams,
        refs: ReferenceLadder,
        config: CrossbarConfig,
    ) -> Result<Self> {
        params.validate()?;
        config.validate()?;
        if rows == 0 || cols == 0 {
            return Err(Error::domain("crossbar dimensions must be positive"));
        }
        let zero = SynapseState::zero(&params);
        let g = zero.read_current(&params) / config.v_read;
        Ok(CrossbarArray {
            rows,
            cols,
            cells: vec![zero; rows * cols],
            conductance: vec![g; rows * cols],
            params,
            refs,
            config,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn params(&self) -> &DeviceParams {
        &self.params
    }

    pub fn refs(&self) -> &ReferenceLadder {
        &self.refs
    }

    pub fn config(&self) -> &CrossbarConfig {
        &self.config
    }

    pub fn cells(&self) -> &[SynapseState] {
        &self.cells
    }

    /// Number of ADCs serving this array.
    pub fn adc_groups(&self) -> usize {
        self.cols.div_ceil(self.config.adc_share)
    }

    fn index(&self, row: usize, col: usize) -> usize {
        assert!(
            row < self.rows && col < self.cols,
            "cell ({row}, {col}) out of bounds"
        );
        row * self.cols + col
    }

    fn refresh(&mut self, idx: usize) {
        self.conductance[idx] = self.cells[idx].read_current(&self.params) / self.config.v_read;
    }

    pub fn cell(&self, row: usize, col: usize) -> &SynapseState {
        &self.cells[self.index(row, col)]
    }

    pub fn read_current(&self, row: usize, col: usize) -> f64 {
        self.cell(row, col).read_current(&self.params)
    }

    pub fn conductance(&self, row: usize, col: usize) -> f64 {
        self.conductance[self.index(row, col)]
    }

    pub fn set_state(&mut self, row: usize, col: usize, state: SynapseState) -> Result<()> {
        // round-trip through the parameter checks so a foreign state cannot slip in
        SynapseState::new(&self.params, state.emsb(), state.msb(), state.lsb())?;
        let idx = self.index(row, col);
        self.cells[idx] = state;
        self.refresh(idx);
        Ok(())
    }

    pub fn set_composite(&mut self, row: usize, col: usize, index: u16) -> Result<()> {
        let state = SynapseState::from_composite(&self.params, index)?;
        let idx = self.index(row, col);
        self.cells[idx] = state;
        self.refresh(idx);
        Ok(())
    }

    /// Applies `n` update pulses to one cell at simulated time `now`.
    pub fn apply_pulses(
        &mut self,
        row: usize,
        col: usize,
        n: i32,
        now: SimTime,
    ) -> Vec<TransferEvent> {
        let idx = self.index(row, col);
        let cell = &mut self.cells[idx];
        let events = cell.apply_pulses(n, &self.params, &self.refs);
        if events
            .iter()
            .any(|e| matches!(e, TransferEvent::Saturation { .. }))
        {
            cell.touch(now);
        }
        if n != 0 {
            self.refresh(idx);
        }
        events
    }

    /// Periodic transfer on one cell; the gate node counts as reprogrammed.
    pub fn periodic_transfer(
        &mut self,
        row: usize,
        col: usize,
        policy: &TransferPolicy,
        now: SimTime,
    ) -> TransferOutcome {
        let idx = self.index(row, col);
        let out = self.cells[idx].periodic_transfer(policy, &self.params, &self.refs);
        self.cells[idx].touch(now);
        self.refresh(idx);
        out
    }

    /// Accrues leakage on every cell up to `now`; returns LSB states lost.
    pub fn accrue_decay(&mut self, now: SimTime) -> u64 {
        let mut lost = 0u64;
        for idx in 0..self.cells.len() {
            let l = self.cells[idx].accrue_decay(now, &self.params);
            if l > 0 {
                lost += u64::from(l);
                self.refresh(idx);
            }
        }
        lost
    }

    /// Applies an idle period of `elapsed_ns` to every cell.
    pub fn apply_decay(&mut self, elapsed_ns: u64) -> u64 {
        let mut lost = 0u64;
        for idx in 0..self.cells.len() {
            let l = self.cells[idx].apply_decay(elapsed_ns, &self.params);
            if l > 0 {
                lost += u64::from(l);
                self.refresh(idx);
            }
        }
        lost
    }

    fn check_inputs(&self, inputs: &[f64]) -> Result<()> {
        if inputs.len() != self.rows {
            return Err(Error::domain(format!(
                "input vector has {} entries, array has {} rows",
                inputs.len(),
                self.rows
            )));
        }
        let bound = self.config.v_read;
        if let Some(v) = inputs.iter().find(|v| !(0.0..=bound).contains(*v)) {
            return Err(Error::domain(format!(
                "input voltage {v} outside [0, {bound}] V"
            )));
        }
        Ok(())
    }

    /// Adds the column currents for `inputs` into `out`.
    pub fn forward_accumulate(&self, inputs: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_inputs(inputs)?;
        if out.len() != self.cols {
            return Err(Error::domain(format!(
                "output buffer has {} entries, array has {} columns",
                out.len(),
                self.cols
            )));
        }
        for (v, g_row) in inputs.iter().zip(self.conductance.chunks_exact(self.cols)) {
            if *v == 0.0 {
                continue;
            }
            for (o, g) in out.iter_mut().zip(g_row) {
                *o += v * g;
            }
        }
        Ok(())
    }

    /// Column currents (µA) for input voltages on the rows.
    pub fn forward(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.cols];
        self.forward_accumulate(inputs, &mut out)?;
        Ok(out)
    }

    /// Column current produced when every row is driven at the read voltage
    /// and every cell sits in its highest state.
    pub fn adc_full_scale(&self) -> f64 {
        self.rows as f64 * self.params.max_current()
    }

    pub fn forward_quantized(&self, inputs: &[f64]) -> Result<Vec<u32>> {
        let fs = self.adc_full_scale();
        Ok(self
            .forward(inputs)?
            .into_iter()
            .map(|i| adc_quantize(i, fs, self.config.adc_bits))
            .collect())
    }
}

/// A logical matrix larger than one array, split row- and column-wise into
/// tiles whose partial sums are accumulated digitally in a fixed order.
#[derive(Debug, Clone)]
pub struct TiledCrossbar {
    rows: usize,
    cols: usize,
    tile_rows: usize,
    tile_cols: usize,
    grid_cols: usize,
    tiles: Vec<CrossbarArray>,
}

impl TiledCrossbar {
    pub fn new(
        rows: usize,
        cols: usize,
        params: &DeviceParams,
        refs: &ReferenceLadder,
        config: &CrossbarConfig,
    ) -> Result<Self> {
        config.validate()?;
        if rows == 0 || cols == 0 {
            return Err(Error::domain("matrix dimensions must be positive"));
        }
        let (tr, tc) = (config.tile_rows, config.tile_cols);
        let grid_rows = rows.div_ceil(tr);
        let grid_cols = cols.div_ceil(tc);
        let mut tiles = Vec::with_capacity(grid_rows * grid_cols);
        for gr in 0..grid_rows {
            for gc in 0..grid_cols {
                let r = tr.min(rows - gr * tr);
                let c = tc.min(cols - gc * tc);
                tiles.push(CrossbarArray::new(
                    r,
                    c,
                    params.clone(),
                    refs.clone(),
                    config.clone(),
                )?);
            }
        }
        Ok(TiledCrossbar {
            rows,
            cols,
            tile_rows: tr,
            tile_cols: tc,
            grid_cols,
            tiles,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tiles(&self) -> &[CrossbarArray] {
        &self.tiles
    }

    pub fn params(&self) -> &DeviceParams {
        self.tiles[0].params()
    }

    pub fn config(&self) -> &CrossbarConfig {
        self.tiles[0].config()
    }

    fn locate(&self, row: usize, col: usize) -> (usize, usize, usize) {
        assert!(
            row < self.rows && col < self.cols,
            "cell ({row}, {col}) out of bounds"
        );
        let t = (row / self.tile_rows) * self.grid_cols + col / self.tile_cols;
        (t, row % self.tile_rows, col % self.tile_cols)
    }

    pub fn cell(&self, row: usize, col: usize) -> &SynapseState {
        let (t, r, c) = self.locate(row, col);
        self.tiles[t].cell(r, c)
    }

    pub fn read_current(&self, row: usize, col: usize) -> f64 {
        let (t, r, c) = self.locate(row, col);
        self.tiles[t].read_current(r, c)
    }

    pub fn composite(&self, row: usize, col: usize) -> u16 {
        self.cell(row, col).composite(self.params())
    }

    pub fn set_composite(&mut self, row: usize, col: usize, index: u16) -> Result<()> {
        let (t, r, c) = self.locate(row, col);
        self.tiles[t].set_composite(r, c, index)
    }

    pub fn apply_pulses(
        &mut self,
        row: usize,
        col: usize,
        n: i32,
        now: SimTime,
    ) -> Vec<TransferEvent> {
        let (t, r, c) = self.locate(row, col);
        self.tiles[t].apply_pulses(r, c, n, now)
    }

    pub fn periodic_transfer(
        &mut self,
        row: usize,
        col: usize,
        policy: &TransferPolicy,
        now: SimTime,
    ) -> TransferOutcome {
        let (t, r, c) = self.locate(row, col);
        self.tiles[t].periodic_transfer(r, c, policy, now)
    }

    pub fn accrue_decay(&mut self, now: SimTime) -> u64 {
        self.tiles.iter_mut().map(|t| t.accrue_decay(now)).sum()
    }

    pub fn apply_decay(&mut self, elapsed_ns: u64) -> u64 {
        self.tiles
            .iter_mut()
            .map(|t| t.apply_decay(elapsed_ns))
            .sum()
    }

    /// Column currents of the whole logical matrix. Partial sums are added
    /// tile row by tile row, top to bottom.
    pub fn forward(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.cols];
        self.forward_into(inputs, &mut out)?;
        Ok(out)
    }

    pub fn forward_into(&self, inputs: &[f64], out: &mut [f64]) -> Result<()> {
        if inputs.len() != self.rows || out.len() != self.cols {
            return Err(Error::domain(format!(
                "matrix is {}x{}, got {} inputs and {} outputs",
                self.rows,
                self.cols,
                inputs.len(),
                out.len()
            )));
        }
        out.fill(0.0);
        let mut partial = vec![0.0; self.tile_cols];
        for (t, tile) in self.tiles.iter().enumerate() {
            let r0 = (t / self.grid_cols) * self.tile_rows;
            let c0 = (t % self.grid_cols) * self.tile_cols;
            let partial = &mut partial[..tile.cols()];
            partial.fill(0.0);
            tile.forward_accumulate(&inputs[r0..r0 + tile.rows()], partial)?;
            let adc = tile
                .config()
                .adc_enabled
                .then(|| (tile.adc_full_scale(), tile.config().adc_bits));
            for (o, p) in out[c0..c0 + tile.cols()].iter_mut().zip(partial.iter()) {
                *o += match adc {
                    Some((fs, bits)) => {
                        f64::from(adc_quantize(*p, fs, bits)) * fs / ((1u64 << bits) - 1) as f64
                    }
                    None => *p,
                };
            }
        }
        Ok(())
    }

    /// Every cell in row-major order of the logical matrix.
    pub fn for_each_cell(&self, mut f: impl FnMut(usize, usize, &SynapseState)) {
        for row in 0..self.rows {
            for col in 0..self.cols {
                f(row, col, self.cell(row, col));
            }
        }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let mut states = Vec::with_capacity(self.rows * self.cols);
        self.for_each_cell(|_, _, s| states.push(s.composite(self.params())));
        StateSnapshot {
            rows: self.rows,
            cols: self.cols,
            states,
        }
    }

    pub fn restore(&mut self, snapshot: &StateSnapshot) -> Result<()> {
        if snapshot.rows != self.rows || snapshot.cols != self.cols {
            return Err(Error::domain(format!(
                "snapshot is {}x{}, matrix is {}x{}",
                snapshot.rows, snapshot.cols, self.rows, self.cols
            )));
        }
        for row in 0..self.rows {
            for col in 0..self.cols {
                self.set_composite(row, col, snapshot.get(row, col))?;
            }
        }
        Ok(())
    }
}

/// Composite state indices of a matrix, the checkpoint format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSnapshot {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub states: Vec<u16>,
}

impl StateSnapshot {
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.states[row * self.cols + col]
    }

    /// CSV with a `c0..c{cols-1}` header and one line per matrix row.
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record((0..self.cols).map(|c| format!("c{c}")))?;
        for row in self.states.chunks(self.cols) {
            w.write_record(row.iter().map(u16::to_string))?;
        }
        w.flush()
    }

    pub fn read_csv<R: Read>(reader: R, origin: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let bad = |reason: String| Error::format(origin, reason);
        let cols = r.headers().map_err(|e| bad(e.to_string()))?.len();
        if cols == 0 {
            return Err(bad("snapshot has no columns".into()));
        }
        let mut states = Vec::new();
        let mut rows = 0;
        for record in r.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            if record.len() != cols {
                return Err(bad(format!(
                    "row {rows} has {} fields, expected {cols}",
                    record.len()
                )));
            }
            for field in record.iter() {
                states.push(
                    field
                        .trim()
                        .parse::<u16>()
                        .map_err(|_| bad(format!("row {rows}: invalid state index {field:?}")))?,
                );
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(bad("snapshot has no rows".into()));
        }
        Ok(StateSnapshot { rows, cols, states })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), path)
    }
}
