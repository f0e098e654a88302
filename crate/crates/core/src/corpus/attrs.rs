use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

macro_rules! closed_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).expect("member")
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn word(self) -> &'static str {
                match self { $($name::$var => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$var),)+ _ => None }
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.word())
            }
        }
    };
}

closed_enum!(ShapeClass {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
});

closed_enum!(
    /// Six-colour palette.
    Color {
        Red => "red",
        Green => "green",
        Blue => "blue",
        Yellow => "yellow",
        Purple => "purple",
        Cyan => "cyan",
    }
);

closed_enum!(Orientation {
    Up => "up",
    Down => "down",
    Left => "left",
    Right => "right",
});

closed_enum!(
    /// Visual-pattern families a blind pair can differ in. `Presence` is the
    /// shape class itself.
    PatternFamily {
        Color => "color",
        Count => "count",
        Position => "position",
        Orientation => "orientation",
        Presence => "presence",
    }
);

impl ShapeClass {
    pub fn plural(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circles",
            ShapeClass::Square => "squares",
            ShapeClass::Triangle => "triangles",
        }
    }

    /// Mask label; 0 is background.
    pub fn label(self) -> u8 {
        self.index() as u8 + 1
    }
}

impl Color {
    /// 8-bit RGB levels; images are exactly `level / 255`.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 25, 25],
            Color::Green => [25, 205, 25],
            Color::Blue => [25, 50, 230],
            Color::Yellow => [240, 230, 25],
            Color::Purple => [155, 25, 205],
            Color::Cyan => [25, 215, 215],
        }
    }
}

pub const GRID: usize = 3;

/// Position on the 3×3 grid; row 0 is the top.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

impl Cell {
    pub fn new(row: u8, col: u8) -> Self {
        Self { row, col }
    }

    pub fn row_word(self) -> &'static str {
        ["top", "middle", "bottom"][self.row as usize]
    }

    pub fn col_word(self) -> &'static str {
        ["left", "center", "right"][self.col as usize]
    }

    pub fn index(self) -> usize {
        self.row as usize * GRID + self.col as usize
    }
}

/// Ground-truth description of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub shape_class: ShapeClass,
    pub color: Color,
    pub count: u8,
    /// Anchor cell; instances fill a horizontal run starting here.
    pub cell: Cell,
    pub orientation: Option<Orientation>,
    /// Family this scene's training captions always mention.
    pub pattern_family: PatternFamily,
}

impl AttributeRecord {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.count) {
            return Err(CoreError::InvalidAttributes(format!(
                "count {}",
                self.count
            )));
        }
        if self.cell.row as usize >= GRID || self.cell.col as usize >= GRID {
            return Err(CoreError::InvalidAttributes(format!(
                "cell {:?}",
                self.cell
            )));
        }
        if self.cell.col as usize + self.count as usize > GRID {
            return Err(CoreError::InvalidAttributes(format!(
                "{} shapes starting at column {} exceed the grid capacity of {GRID}",
                self.count, self.cell.col
            )));
        }
        let triangle = self.shape_class == ShapeClass::Triangle;
        if triangle != self.orientation.is_some() {
            return Err(CoreError::InvalidAttributes(
                "orientation must be present exactly for triangles".into(),
            ));
        }
        if self.pattern_family == PatternFamily::Orientation && !triangle {
            return Err(CoreError::InvalidAttributes(
                "orientation family requires a triangle".into(),
            ));
        }
        Ok(())
    }

    /// Cells occupied by the rendered instances.
    pub fn occupied_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.count).map(move |i| Cell::new(self.cell.row, self.cell.col + i))
    }

    /// Families in which two scenes differ. A shape-class change counts only
    /// as `Presence`; orientation is compared only between two triangles.
    pub fn differing_families(&self, other: &Self) -> Vec<PatternFamily> {
        let mut out = Vec::new();
        if self.color != other.color {
            out.push(PatternFamily::Color);
        }
        if self.count != other.count {
            out.push(PatternFamily::Count);
        }
        if self.cell != other.cell {
            out.push(PatternFamily::Position);
        }
        if self.shape_class != other.shape_class {
            out.push(PatternFamily::Presence);
        } else if self.orientation != other.orientation {
            out.push(PatternFamily::Orientation);
        }
        out
    }
}
