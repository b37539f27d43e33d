/** Keyboard bindings for the review loop. */

export type ReviewAction =
  | { type: 'accept' }
  | { type: 'reject' }
  | { type: 'correct' }
  | { type: 'confirm' }
  | { type: 'cancel' }
  | { type: 'undo' }
  | { type: 'next' }
  | { type: 'prev' }
  | { type: 'zoom'; factor: number }
  | { type: 'pan'; dx: number; dy: number };

const PAN_STEP = 32;

export function actionForKey(key: string, shift = false): ReviewAction | null {
  switch (key) {
    case 'a':
    case 'A':
      return { type: 'accept' };
    case 'r':
    case 'R':
      return { type: 'reject' };
    case 'c':
    case 'C':
      return { type: 'correct' };
    case 'Enter':
      return { type: 'confirm' };
    case 'Escape':
      return { type: 'cancel' };
    case 'u':
    case 'U':
      return { type: 'undo' };
    case 'n':
    case ' ':
      return { type: 'next' };
    case 'p':
      return { type: 'prev' };
    case '+':
    case '=':
      return { type: 'zoom', factor: 2 };
    case '-':
    case '_':
      return { type: 'zoom', factor: 0.5 };
    case 'ArrowLeft':
      return { type: 'pan', dx: shift ? PAN_STEP * 4 : PAN_STEP, dy: 0 };
    case 'ArrowRight':
      return { type: 'pan', dx: shift ? -PAN_STEP * 4 : -PAN_STEP, dy: 0 };
    case 'ArrowUp':
      return { type: 'pan', dx: 0, dy: shift ? PAN_STEP * 4 : PAN_STEP };
    case 'ArrowDown':
      return { type: 'pan', dx: 0, dy: shift ? -PAN_STEP * 4 : -PAN_STEP };
    default:
      return null;
  }
}
